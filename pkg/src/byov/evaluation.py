"""Linear probes, Monte-Carlo predictive distributions and calibration metrics."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import optimize

from . import autodiff as ad
from .data import AugmentationSpec, Corruption, Dataset, corrupt
from .model import classify, encode, stage_outputs
from .training import TrainedModel
from .variational import derive_seed, map_sample, sample_weights

NUM_BINS = 15


# representations / probe ----------------------------------------------------

def _weights(model: TrainedModel, seed: int | None):
    with ad.no_grad():
        s = map_sample(model.params) if seed is None else sample_weights(model.params, seed)
    return s.weights


def _batched(fn, images: np.ndarray, batch: int = 1000) -> np.ndarray:
    return np.concatenate([fn(images[i:i + batch]) for i in range(0, len(images), batch)])


def representations(model: TrainedModel, images: np.ndarray, mode: str = "map", K: int = 10,
                    seed: int = 0) -> np.ndarray:
    """Encoder features at the posterior mean ("map") or averaged over K draws ("posterior_mean")."""
    if mode == "map":
        w = _weights(model, None)
        with ad.no_grad():
            return _batched(lambda x: encode(model.spec, w, x).data, images)
    if mode != "posterior_mean":
        raise ValueError(f"mode must be 'map' or 'posterior_mean', got {mode!r}")
    acc = None
    for k in range(K):
        w = _weights(model, derive_seed(seed, "repr", k))
        with ad.no_grad():
            h = _batched(lambda x: encode(model.spec, w, x).data, images)
        acc = h if acc is None else acc + h
    return acc / K


@dataclass
class LinearProbe:
    weight: np.ndarray  # [d, C]
    bias: np.ndarray  # [C]
    feat_mean: np.ndarray
    feat_std: np.ndarray
    converged: bool = True

    def logits(self, features: np.ndarray) -> np.ndarray:
        return ((features - self.feat_mean) / self.feat_std) @ self.weight + self.bias

    def predict(self, features: np.ndarray) -> np.ndarray:
        return self.logits(features).argmax(axis=1)


def _softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def fit_probe_features(features: np.ndarray, labels: np.ndarray, num_classes: int, l2: float = 1e-2,
                       max_iter: int = 1000, tol: float = 1e-5) -> LinearProbe:
    """Multinomial logistic regression (L-BFGS) on standardized features."""
    mean = features.mean(axis=0)
    std = features.std(axis=0) + 1e-8
    X = (features - mean) / std
    n, d = X.shape
    Y = np.eye(num_classes)[labels]

    def objective(theta):
        W = theta[:d * num_classes].reshape(d, num_classes)
        b = theta[d * num_classes:]
        P = _softmax_np(X @ W + b)
        loss = -np.sum(Y * np.log(np.clip(P, 1e-300, None))) / n + 0.5 * l2 * np.sum(W * W)
        G = (P - Y) / n
        return loss, np.concatenate([(X.T @ G + l2 * W).ravel(), G.sum(axis=0)])

    res = optimize.minimize(objective, np.zeros(d * num_classes + num_classes), jac=True, method="L-BFGS-B",
                            options={"maxiter": max_iter, "gtol": tol})
    gnorm = float(np.linalg.norm(objective(res.x)[1]))
    converged = gnorm <= tol * 10
    if not converged:
        warnings.warn(f"linear probe not converged: gradient norm {gnorm:.2e} after {res.nit} iterations")
    return LinearProbe(res.x[:d * num_classes].reshape(d, num_classes), res.x[d * num_classes:], mean, std,
                       converged)


def fit_linear_probe(model: TrainedModel, train: Dataset, mode: str = "map", K: int = 10, seed: int = 0,
                     l2: float = 1e-2) -> LinearProbe:
    if train.labels is None:
        raise ValueError("linear probe needs labels")
    feats = representations(model, train.images, mode, K, seed)
    return fit_probe_features(feats, train.labels, train.num_classes, l2)


def topk_accuracy(probs: np.ndarray, labels: np.ndarray, k: int) -> float:
    k = min(k, probs.shape[1])
    top = np.argsort(-probs, axis=1, kind="stable")[:, :k]
    return float(np.mean((top == labels[:, None]).any(axis=1)))


def probe_accuracy(model: TrainedModel, probe: LinearProbe, data: Dataset, mode: str = "map") -> float:
    return float(np.mean(probe.predict(representations(model, data.images, mode)) == data.labels))


# MC predictive ------------------------------------------------------------

@dataclass
class PredictiveSummary:
    probs_mean: np.ndarray  # [N, C]
    probs_std: np.ndarray  # [N, C]
    K: int
    per_draw_correct: np.ndarray | None = None  # [K, N]
    draws: np.ndarray | None = None  # [K, N, C] when kept

    @property
    def scalar_std(self) -> np.ndarray:
        """Per-sample predictive std: mean over classes of the across-draw std."""
        return self.probs_std.mean(axis=1)


def draw_probs(model: TrainedModel, images: np.ndarray, seed: int | None, probe: LinearProbe | None = None
               ) -> np.ndarray:
    w = _weights(model, seed)
    with ad.no_grad():
        if model.mode == "supervised":
            logits = _batched(lambda x: classify(model.spec, w, x).data, images)
        else:
            if probe is None:
                raise ValueError("self-supervised models need a linear probe for class predictions")
            logits = probe.logits(_batched(lambda x: encode(model.spec, w, x).data, images))
    return _softmax_np(logits)


def mc_predict(model: TrainedModel, data: Dataset | np.ndarray, K: int, seed: int = 0,
               probe: LinearProbe | None = None, keep_draws: bool = False) -> PredictiveSummary:
    """K posterior draws -> per-class mean and (population) std of softmax outputs."""
    if K < 1:
        raise ValueError("K must be >= 1")
    images = data.images if isinstance(data, Dataset) else data
    labels = data.labels if isinstance(data, Dataset) else None
    draws = np.stack([draw_probs(model, images, derive_seed(seed, "mc", k), probe) for k in range(K)])
    mean = draws.mean(axis=0)
    std = np.sqrt(_spread(draws, ddof=0))
    correct = draws.argmax(axis=2) == labels[None] if labels is not None else None
    return PredictiveSummary(mean, std, K, correct, draws if keep_draws else None)


def _spread(stack: np.ndarray, ddof: int) -> np.ndarray:
    """Variance over axis 0, shifted by the first draw so identical draws give exactly zero."""
    d = stack - stack[0]
    m = d.mean(axis=0)
    return np.maximum(((d - m) ** 2).sum(axis=0) / (len(stack) - ddof), 0.0)


# calibration ----------------------------------------------------------------

@dataclass
class CalibrationBin:
    lower: float
    upper: float
    confidence: float
    accuracy: float
    count: int


@dataclass
class CalibrationReport:
    ece: float
    brier: float
    reliability: float  # binned reliability + within-bin variance - within-bin covariance
    resolution: float
    uncertainty: float
    top1: float
    top5: float
    binned_reliability: float = 0.0
    within_bin_variance: float = 0.0
    within_bin_covariance: float = 0.0
    bins: list[CalibrationBin] = field(default_factory=list)

    def row(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in ("ece", "brier", "reliability", "resolution", "uncertainty",
                                              "top1", "top5")}


def bin_index(confidence: np.ndarray, num_bins: int) -> np.ndarray:
    """Equal-width bins (lo, hi]; a confidence of exactly 0 lands in the first bin."""
    return np.clip(np.ceil(confidence * num_bins).astype(np.int64) - 1, 0, num_bins - 1)


def calibration(probs: PredictiveSummary | np.ndarray, labels: np.ndarray, num_bins: int = NUM_BINS
                ) -> CalibrationReport:
    """ECE on max-prob confidence, multi-class Brier, and its Murphy decomposition over the same bins.

    The within-bin terms make ``brier == reliability - resolution + uncertainty``
    hold exactly rather than only when every bin has one forecast value.
    """
    P = probs.probs_mean if isinstance(probs, PredictiveSummary) else np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    n, C = P.shape if P.ndim == 2 else (0, 0)
    if n == 0:
        raise ValueError("calibration: empty dataset")
    Y = np.eye(C)[labels]
    conf = P.max(axis=1)
    correct = (P.argmax(axis=1) == labels).astype(np.float64)
    b = bin_index(conf, num_bins)

    brier = float(np.mean(np.sum((P - Y) ** 2, axis=1)))
    ybar = Y.mean(axis=0)
    unc = float(np.mean(np.sum((Y - ybar) ** 2, axis=1)))
    ece = rel = res = wbv = wbc = 0.0
    bins = []
    for k in range(num_bins):
        sel = b == k
        nk = int(sel.sum())
        lo, hi = k / num_bins, (k + 1) / num_bins
        if nk == 0:
            bins.append(CalibrationBin(lo, hi, 0.0, 0.0, 0))
            continue
        acc_k, conf_k = float(correct[sel].mean()), float(conf[sel].mean())
        bins.append(CalibrationBin(lo, hi, conf_k, acc_k, nk))
        ece += nk / n * abs(acc_k - conf_k)
        pk, yk = P[sel], Y[sel]
        pbar, ybar_k = pk.mean(axis=0), yk.mean(axis=0)
        rel += nk / n * float(np.sum((pbar - ybar_k) ** 2))
        res += nk / n * float(np.sum((ybar_k - ybar) ** 2))
        wbv += float(np.sum((pk - pbar) ** 2)) / n
        wbc += 2.0 * float(np.sum((pk - pbar) * (yk - ybar_k))) / n
    return CalibrationReport(
        ece=ece, brier=brier, reliability=rel + wbv - wbc, resolution=res, uncertainty=unc,
        top1=topk_accuracy(P, labels, 1), top5=topk_accuracy(P, labels, 5),
        binned_reliability=rel, within_bin_variance=wbv, within_bin_covariance=wbc, bins=bins,
    )


# predictive-std comparison --------------------------------------------------

@dataclass
class StdComparison:
    std_reference: np.ndarray  # supervised BBB
    std_candidate: np.ndarray  # BYOV
    pearson: float  # NaN when either std vector is constant
    mean: np.ndarray  # [2]
    cov: np.ndarray  # [2, 2]

    def write_csv(self, path, labels: np.ndarray | None = None) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "std_supervised_bbb", "std_byov", "label"])
            for i, (a, b) in enumerate(zip(self.std_reference, self.std_candidate)):
                w.writerow([i, repr(float(a)), repr(float(b)), "" if labels is None else int(labels[i])])


def pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    denom = math.sqrt(float(np.sum(a * a)) * float(np.sum(b * b)))
    if denom == 0.0 or not np.isfinite(denom):
        return float("nan")
    return float(np.sum(a * b)) / denom


def compare_predictive_std(candidate: TrainedModel, reference: TrainedModel, data: Dataset, K: int,
                           seed: int = 0, probe: LinearProbe | None = None) -> StdComparison:
    """Paired per-sample predictive std of a BYOV model (with probe) and a supervised BBB model."""
    fa, fb = candidate.data_fingerprint, reference.data_fingerprint
    if fa and fb and fa != fb:
        raise ValueError(f"models were trained on different data ({fa} vs {fb})")
    s_ref = mc_predict(reference, data, K, seed, probe=None).scalar_std
    s_cand = mc_predict(candidate, data, K, seed, probe=probe).scalar_std
    pairs = np.stack([s_ref, s_cand], axis=1)
    return StdComparison(s_ref, s_cand, pearson(s_ref, s_cand), pairs.mean(axis=0), np.cov(pairs.T))


# MC sample-count ablation ---------------------------------------------------

@dataclass
class MCAblation:
    K: np.ndarray
    std_of_mean: np.ndarray  # averaged over samples and classes
    mean_of_mean: np.ndarray
    slope: float  # log-log fit over all K
    trailing_slope: float  # log-log fit over the upper half of K


def mc_ablation(draws: np.ndarray, k_max: int = 50, n_boot: int = 50, seed: int = 0) -> MCAblation:
    """Bootstrap the running mean of K draws (K = 1..k_max) from a pool of per-draw probabilities."""
    pool = draws.shape[0]
    rng = np.random.Generator(np.random.Philox(derive_seed(seed, "mc-ablation")))
    count = 0
    mean = np.zeros((k_max,) + draws.shape[1:])
    m2 = np.zeros_like(mean)
    ks = np.arange(1, k_max + 1)
    for _ in range(n_boot):
        idx = rng.integers(0, pool, size=k_max)
        running = np.cumsum(draws[idx], axis=0) / ks.reshape(-1, *([1] * (draws.ndim - 1)))
        count += 1
        delta = running - mean
        mean += delta / count
        m2 += delta * (running - mean)
    std = np.sqrt(m2 / max(count - 1, 1))
    s = std.reshape(k_max, -1).mean(axis=1)
    mu = mean.reshape(k_max, -1).mean(axis=1)
    logk, logs = np.log(ks), np.log(np.maximum(s, 1e-300))
    slope = float(np.polyfit(logk, logs, 1)[0])
    half = k_max // 2
    trailing = float(np.polyfit(logk[half - 1:], logs[half - 1:], 1)[0])
    return MCAblation(ks, s, mu, slope, trailing)


# latent variance under noise --------------------------------------------------

STAGES = ("encoder", "projector", "predictor")


@dataclass
class LatentVarianceProfile:
    noise_levels: list[float]
    # variance[noise_index][stage] -> per-image scalar variance, shape [N]
    variance: list[dict[str, np.ndarray]]

    def summary(self) -> list[dict]:
        rows = []
        for s, per_stage in zip(self.noise_levels, self.variance):
            for stage in STAGES:
                v = per_stage[stage]
                rows.append({"noise": s, "stage": stage, "mean_variance": float(v.mean()),
                             "dispersion": float(v.std())})
        return rows

    def rows(self) -> list[dict]:
        out = []
        for s, per_stage in zip(self.noise_levels, self.variance):
            for stage in STAGES:
                for i, v in enumerate(per_stage[stage]):
                    out.append({"noise": s, "image": i, "stage": stage, "variance": float(v)})
        return out


def latent_variance_profile(model: TrainedModel, images: np.ndarray, noise_levels: Sequence[float], M: int = 50,
                            seed: int = 0) -> LatentVarianceProfile:
    """Per-image variance (across M posterior draws, mean over features) at each model stage."""
    if M < 2:
        raise ValueError("M must be >= 2")
    out = []
    weights = [_weights(model, derive_seed(seed, "latent", m)) for m in range(M)]
    for level in noise_levels:
        x = corrupt(images, AugmentationSpec(Corruption.GAUSSIAN_NOISE, level), derive_seed(seed, "noise"))
        outs = [stage_outputs(model.spec, w, x) for w in weights]
        out.append({st: _spread(np.stack([o[st] for o in outs]), ddof=1).mean(axis=1) for st in STAGES})
    return LatentVarianceProfile(list(noise_levels), out)
