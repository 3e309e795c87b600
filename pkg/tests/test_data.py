import gzip
import struct

import hypothesis.extra.numpy as hnp
import hypothesis.strategies as st
import numpy as np
import pytest
from hypothesis import given
from scipy import integrate, stats

from byov.config import DataConfig, load_splits
from byov.data import (
    AugmentationSpec,
    AugmentConfig,
    Corruption,
    Dataset,
    IDXParseError,
    apply_ood,
    corrupt,
    epoch_batches,
    load_idx_dataset,
    parse_idx,
    read_idx,
    synthetic_dataset,
    two_views,
    write_idx,
)


def idx_bytes(code, dims, payload):
    return struct.pack(">BBBB", 0, 0, code, len(dims)) + struct.pack(f">{len(dims)}I", *dims) + payload


def test_image_magic_gives_header_dims():
    buf = idx_bytes(0x08, (2, 3, 4), bytes(range(24)))
    assert buf[:4] == b"\x00\x00\x08\x03"
    arr = parse_idx(buf)
    assert arr.shape == (2, 3, 4) and arr[1, 2, 3] == 23


def test_label_magic_gives_label_list(tmp_path):
    buf = idx_bytes(0x08, (5,), bytes([3, 1, 4, 1, 5]))
    assert buf[:4] == b"\x00\x00\x08\x01"
    (tmp_path / "l.idx").write_bytes(buf)
    assert read_idx(tmp_path / "l.idx").tolist() == [3, 1, 4, 1, 5]


@pytest.mark.parametrize("buf, offset", [
    (b"\x01\x00\x08\x01", 0),
    (b"\x00\x00\x07\x01", 2),
    (b"\x00\x00\x08\x02\x00\x00", 6),
    (idx_bytes(0x08, (4,), b"\x00\x01"), 10),
    (idx_bytes(0x08, (2,), b"\x00\x01\x02"), 10),
])
def test_malformed_idx_reports_byte_offset(buf, offset):
    with pytest.raises(IDXParseError) as exc:
        parse_idx(buf)
    assert exc.value.offset == offset
    assert f"byte offset {offset}" in str(exc.value)


@given(hnp.arrays(st.sampled_from([np.uint8, np.int16, np.int32, np.float32, np.float64]),
                  hnp.array_shapes(min_dims=1, max_dims=3, max_side=5)))
def test_idx_round_trip(tmp_path_factory, arr):
    d = tmp_path_factory.mktemp("idx")
    for name in ("a.idx", "a.idx.gz"):
        write_idx(d / name, arr)
        back = read_idx(d / name)
        assert back.shape == arr.shape
        assert back.tobytes() == arr.astype(back.dtype).tobytes()
    assert gzip.decompress((d / "a.idx.gz").read_bytes()) == (d / "a.idx").read_bytes()


def test_bundled_mnist_subset():
    train, test = load_splits(DataConfig())
    assert train.images.shape == (4000, 1, 28, 28) and test.images.shape == (1000, 1, 28, 28)
    assert np.bincount(train.labels).tolist() == [400] * 10
    assert np.bincount(test.labels).tolist() == [100] * 10
    assert 0.0 <= train.images.min() and train.images.max() <= 1.0


def test_dataset_invariants():
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        Dataset(np.full((1, 1, 2, 2), 2.0))
    with pytest.raises(ValueError, match="labels"):
        Dataset(np.zeros((2, 1, 2, 2)), np.array([0, 3]), num_classes=3)


def test_synthetic_deterministic():
    a, b = synthetic_dataset(100, 4, 7), synthetic_dataset(100, 4, 7)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)
    assert a.fingerprint() == b.fingerprint() != synthetic_dataset(100, 4, 8).fingerprint()


def test_two_views_identity_when_disabled():
    img = synthetic_dataset(3, 2, 0).images
    x1, x2 = two_views(img, 5, AugmentConfig(enabled=False))
    assert np.array_equal(x1, img) and np.array_equal(x2, img)


def test_two_views_deterministic_and_distinct():
    imgs = synthetic_dataset(100, 4, 0).images
    a1, a2 = two_views(imgs, 9)
    b1, b2 = two_views(imgs, 9)
    assert np.array_equal(a1, b1) and np.array_equal(a2, b2)
    assert all(not np.array_equal(u, v) for u, v in zip(a1, a2))


def test_epoch_batches_reproducible():
    assert all(np.array_equal(a, b) for a, b in zip(epoch_batches(50, 8, 1, 3), epoch_batches(50, 8, 1, 3)))
    batches = epoch_batches(50, 8, 1, 0)
    assert len(batches) == 6 and len(np.unique(np.concatenate(batches))) == 48


def test_ood_examples():
    data = synthetic_dataset(20, 2, 0)
    assert np.array_equal(apply_ood(data, AugmentationSpec("gaussian_noise", 0.0)).images, data.images)
    sp = corrupt(data.images, AugmentationSpec(Corruption.SALT_PEPPER, 1.0))
    assert set(np.unique(sp)) <= {0.0, 1.0}
    with pytest.raises(ValueError, match="unknown augmentation kind"):
        AugmentationSpec("fog", 0.1)


@given(st.sampled_from(list(Corruption)), st.floats(0.05, 1.0), st.integers(0, 100))
def test_corruptions_preserve_shape_and_range(kind, strength, seed):
    imgs = synthetic_dataset(4, 2, 0).images
    out = corrupt(imgs, AugmentationSpec(kind, strength if kind is not Corruption.SHEAR else 40 * strength), seed)
    assert out.shape == imgs.shape
    assert out.min() >= 0.0 and out.max() <= 1.0
    assert np.array_equal(out, corrupt(imgs, AugmentationSpec(kind, strength if kind is not Corruption.SHEAR
                                                              else 40 * strength), seed))


def _clipped_moments(x, sigma):
    """E[d], E[d^2] for d = clip(x + n, 0, 1) - x, n ~ N(0, sigma^2), by quadrature."""
    pdf = stats.norm(0, sigma).pdf
    a, b = -x, 1.0 - x
    m1 = integrate.quad(lambda n: n * pdf(n), a, b)[0] + (-x) * stats.norm.cdf(a / sigma) + b * stats.norm.sf(b / sigma)
    m2 = integrate.quad(lambda n: n * n * pdf(n), a, b)[0] + x * x * stats.norm.cdf(a / sigma) + b * b * stats.norm.sf(
        b / sigma)
    return m1, m2


def test_gaussian_noise_matches_clipped_moment_oracle():
    train = load_idx_dataset("data/mnist5k/train-images-idx3-ubyte.gz")
    imgs = train.images[:1300]  # ~1e6 pixels
    sigma = 0.2
    d = corrupt(imgs, AugmentationSpec(Corruption.GAUSSIAN_NOISE, sigma), 3) - imgs
    values, counts = np.unique(imgs, return_counts=True)
    moments = np.array([_clipped_moments(v, sigma) for v in values])
    w = counts / counts.sum()
    mean = w @ moments[:, 0]
    var = w @ moments[:, 1] - mean ** 2
    n = d.size
    assert abs(d.mean() - mean) < 6 * np.sqrt(var / n)
    # variance of the sample variance is bounded by E[d^4] / n
    assert abs(d.var() - var) < 6 * np.sqrt(np.mean(d ** 4) / n)
