"""Datasets, IDX I/O, paired training views and out-of-distribution corruptions."""

from __future__ import annotations

import enum
import gzip
import hashlib
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .variational import layer_rng

IDX_DTYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IDXParseError(ValueError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (byte offset {offset})")
        self.offset = offset


@dataclass
class Dataset:
    images: np.ndarray  # [N, C, H, W] float64 in [0, 1]
    labels: np.ndarray | None = None
    split: str = "train"
    num_classes: int | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be [N, C, H, W], got shape {self.images.shape}")
        if self.images.min() < 0.0 or self.images.max() > 1.0:
            raise ValueError("pixel values must lie in [0, 1]")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.images),):
                raise ValueError(f"{len(self.labels)} labels for {len(self.images)} images")
            if self.num_classes is None:
                self.num_classes = int(self.labels.max()) + 1
            if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
                raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, idx) -> Dataset:
        labels = None if self.labels is None else self.labels[idx]
        return Dataset(self.images[idx], labels, self.split, self.num_classes)

    def fingerprint(self) -> str:
        h = hashlib.sha256(np.ascontiguousarray(self.images).tobytes())
        if self.labels is not None:
            h.update(self.labels.tobytes())
        return h.hexdigest()[:16]


# IDX ------------------------------------------------------------------------

def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    return gzip.decompress(raw) if raw[:2] == b"\x1f\x8b" else raw


def parse_idx(buf: bytes) -> np.ndarray:
    if len(buf) < 4:
        raise IDXParseError("truncated magic number", len(buf))
    if buf[0] or buf[1]:
        raise IDXParseError("magic number must start with two zero bytes", 0)
    code, ndim = buf[2], buf[3]
    if code not in IDX_DTYPES:
        raise IDXParseError(f"unknown IDX type code 0x{code:02x}", 2)
    if ndim == 0:
        raise IDXParseError("IDX rank must be positive", 3)
    header_end = 4 + 4 * ndim
    if len(buf) < header_end:
        raise IDXParseError("truncated dimension header", len(buf))
    dims = struct.unpack_from(f">{ndim}I", buf, 4)
    dtype = IDX_DTYPES[code]
    count = int(np.prod(dims, dtype=np.int64))
    expected = header_end + count * dtype.itemsize
    if len(buf) < expected:
        raise IDXParseError(f"payload too short: need {expected} bytes, have {len(buf)}", len(buf))
    if len(buf) > expected:
        raise IDXParseError("trailing bytes after payload", expected)
    return np.frombuffer(buf, dtype=dtype, count=count, offset=header_end).reshape(dims)


def read_idx(path) -> np.ndarray:
    return parse_idx(_read_bytes(path))


def write_idx(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    code = next((c for c, dt in IDX_DTYPES.items() if dt.newbyteorder("=") == arr.dtype.newbyteorder("=")), None)
    if code is None:
        raise ValueError(f"dtype {arr.dtype} has no IDX type code")
    payload = struct.pack(">BBBB", 0, 0, code, arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
    payload += arr.astype(IDX_DTYPES[code]).tobytes()
    path = Path(path)
    path.write_bytes(gzip.compress(payload, mtime=0) if path.suffix == ".gz" else payload)


def load_idx_dataset(images_path, labels_path=None, split: str = "train", num_classes: int | None = None) -> Dataset:
    imgs = read_idx(images_path)
    if imgs.ndim == 3:
        imgs = imgs[:, None]
    if imgs.ndim != 4:
        raise ValueError(f"{images_path}: expected rank-3 or rank-4 image array, got rank {imgs.ndim}")
    scale = 255.0 if imgs.dtype.kind == "u" else 1.0
    labels = None if labels_path is None else read_idx(labels_path).astype(np.int64)
    return Dataset(imgs.astype(np.float64) / scale, labels, split, num_classes)


def synthetic_dataset(n: int = 512, classes: int = 4, seed: int = 0, image_shape=(1, 12, 12),
                      noise: float = 0.1, split: str = "train") -> Dataset:
    """Class-structured Gaussian blobs: each class has a fixed bump location/width."""
    c, h, w = image_shape
    proto_rng = layer_rng(seed, "synthetic-prototypes")
    centers = proto_rng.uniform(0.2, 0.8, size=(classes, 2)) * [h, w]
    widths = proto_rng.uniform(0.1, 0.2, size=classes) * min(h, w)
    rng = layer_rng(seed, "synthetic", split)
    labels = np.arange(n) % classes
    rng.shuffle(labels)
    yy, xx = np.mgrid[0:h, 0:w]
    jitter = rng.normal(0.0, 0.5, size=(n, 2))
    cy = centers[labels, 0] + jitter[:, 0]
    cx = centers[labels, 1] + jitter[:, 1]
    wd = widths[labels][:, None, None]
    blob = np.exp(-((yy[None] - cy[:, None, None]) ** 2 + (xx[None] - cx[:, None, None]) ** 2) / (2 * wd ** 2))
    imgs = np.repeat(blob[:, None], c, axis=1) + noise * rng.standard_normal((n, c, h, w))
    return Dataset(np.clip(imgs, 0.0, 1.0), labels, split, classes)


# training views -------------------------------------------------------------

@dataclass
class AugmentConfig:
    enabled: bool = True
    crop_pad: int = 4  # max translation in pixels
    flip_prob: float = 0.0
    brightness: float = 0.4  # multiplicative factor drawn from [1 - b, 1 + b]
    noise_std: float = 0.1


def augment_batch(images: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig) -> np.ndarray:
    if not cfg.enabled:
        return images.copy()
    n, c, h, w = images.shape
    out = images
    if cfg.crop_pad > 0:
        k = cfg.crop_pad
        padded = np.pad(images, ((0, 0), (0, 0), (k, k), (k, k)))
        off = rng.integers(0, 2 * k + 1, size=(n, 2))
        out = np.empty_like(images)
        for i in range(n):
            out[i] = padded[i, :, off[i, 0]:off[i, 0] + h, off[i, 1]:off[i, 1] + w]
    if cfg.flip_prob > 0:
        flip = rng.random(n) < cfg.flip_prob
        out = np.where(flip[:, None, None, None], out[..., ::-1], out)
    if cfg.brightness > 0:
        factor = rng.uniform(1.0 - cfg.brightness, 1.0 + cfg.brightness, size=(n, 1, 1, 1))
        out = out * factor
    if cfg.noise_std > 0:
        out = out + cfg.noise_std * rng.standard_normal(out.shape)
    return np.clip(out, 0.0, 1.0)


def two_views(images: np.ndarray, seed: int, cfg: AugmentConfig | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Two independent augmentations of the same image(s); deterministic in ``seed``."""
    cfg = cfg or AugmentConfig()
    single = images.ndim == 3
    batch = images[None] if single else images
    x1 = augment_batch(batch, layer_rng(seed, "view", 1), cfg)
    x2 = augment_batch(batch, layer_rng(seed, "view", 2), cfg)
    return (x1[0], x2[0]) if single else (x1, x2)


def epoch_batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Shuffled index batches for one epoch; the last partial batch is dropped."""
    perm = layer_rng(seed, "epoch", epoch).permutation(n)
    nb = max(n // batch_size, 1)
    return [perm[i * batch_size:(i + 1) * batch_size] for i in range(nb)]


# OOD corruptions -----------------------------------------------------------

class Corruption(str, enum.Enum):
    IDENTITY = "identity"
    GAUSSIAN_NOISE = "gaussian_noise"
    SALT_PEPPER = "salt_pepper"
    SHEAR = "shear"
    CROP = "crop"
    FLIP = "flip"
    BRIGHTNESS = "brightness"


# strengths: noise std / corrupted-pixel fraction / shear degrees /
# kept fraction of the side / flip probability / additive brightness
DEFAULT_LADDERS = {
    Corruption.IDENTITY: [0.0],
    Corruption.GAUSSIAN_NOISE: [0.05, 0.1, 0.2, 0.4, 0.8],
    Corruption.SALT_PEPPER: [0.02, 0.05, 0.1, 0.2, 0.4],
    Corruption.SHEAR: [5.0, 10.0, 20.0, 30.0, 45.0],
    Corruption.CROP: [0.9, 0.8, 0.7, 0.6, 0.5],
    Corruption.FLIP: [1.0],
    Corruption.BRIGHTNESS: [0.1, 0.2, 0.3, 0.4, 0.5],
}


@dataclass(frozen=True)
class AugmentationSpec:
    kind: Corruption
    strength: float = 0.0

    def __post_init__(self):
        try:
            object.__setattr__(self, "kind", Corruption(self.kind))
        except ValueError:
            raise ValueError(f"unknown augmentation kind {self.kind!r}; "
                             f"expected one of {[c.value for c in Corruption]}") from None


def _affine(images: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    n, c, h, w = images.shape
    center = np.array([(h - 1) / 2, (w - 1) / 2])
    offset = center - matrix @ center
    out = np.empty_like(images)
    for i in range(n):
        for ch in range(c):
            out[i, ch] = ndimage.affine_transform(images[i, ch], matrix, offset=offset, order=1,
                                                  mode="constant", cval=0.0)
    return out


def corrupt(images: np.ndarray, spec: AugmentationSpec, seed: int = 0) -> np.ndarray:
    rng = layer_rng(seed, "ood", spec.kind.value)
    s = spec.strength
    k = spec.kind
    if k is Corruption.IDENTITY or s == 0 and k is not Corruption.CROP:
        out = images.copy()
    elif k is Corruption.GAUSSIAN_NOISE:
        out = images + s * rng.standard_normal(images.shape)
    elif k is Corruption.SALT_PEPPER:
        hit = rng.random(images.shape) < s
        salt = rng.random(images.shape) < 0.5
        out = np.where(hit, salt.astype(np.float64), images)
    elif k is Corruption.SHEAR:
        t = np.tan(np.deg2rad(s))
        out = _affine(images, np.array([[1.0, 0.0], [t, 1.0]]))
    elif k is Corruption.CROP:
        if not 0 < s <= 1:
            raise ValueError(f"crop strength is the kept fraction in (0, 1], got {s}")
        out = _affine(images, np.eye(2) * s)
    elif k is Corruption.FLIP:
        flip = rng.random(len(images)) < s
        out = np.where(flip[:, None, None, None], images[..., ::-1], images)
    else:
        out = images + s
    return np.clip(out, 0.0, 1.0)


def apply_ood(dataset: Dataset, spec: AugmentationSpec, seed: int = 0) -> Dataset:
    return replace(dataset, images=corrupt(dataset.images, spec, seed))
