"""Per-layer SNR and magnitude pruning of the encoder, evaluated without retraining."""

from __future__ import annotations

import csv
import enum
import hashlib
import json
from dataclasses import dataclass, replace

import numpy as np

from .data import Dataset
from .evaluation import LinearProbe, representations, topk_accuracy, _softmax_np
from .training import TrainedModel
from .variational import VariationalParam, snr


class Criterion(str, enum.Enum):
    SNR = "snr"
    MAGNITUDE = "magnitude"


@dataclass
class PruneMask:
    masks: dict[str, np.ndarray]
    keep_percentile: float
    criterion: Criterion


def prunable(model: TrainedModel) -> list[str]:
    """Weight matrices of the encoder (linear and patch-conv kernels)."""
    return [n for n in model.params if n.startswith("encoder.") and n.endswith(".weight")]


def keep_count(size: int, keep_percentile: float) -> int:
    """Number of coordinates kept: round-half-up of size * keep / 100, at least one."""
    return max(1, min(size, int(np.floor(size * keep_percentile / 100.0 + 0.5))))


def score(param: VariationalParam, criterion: Criterion) -> np.ndarray:
    if criterion is Criterion.SNR:
        if not param.bayesian:
            raise ValueError(f"SNR pruning needs a Bayesian layer; {param.layer_id} is a point estimate "
                             "(use the magnitude criterion)")
        return snr(param)
    return np.abs(param.mu.data)


def layer_mask(values: np.ndarray, keep_percentile: float) -> np.ndarray:
    """Keep the top-k values; ties go to the earlier flat index."""
    flat = values.ravel()
    k = keep_count(flat.size, keep_percentile)
    order = np.lexsort((np.arange(flat.size), -flat))
    mask = np.zeros(flat.size, dtype=bool)
    mask[order[:k]] = True
    return mask.reshape(values.shape)


def build_mask(model: TrainedModel, criterion, keep_percentile: float, names=None) -> PruneMask:
    if not 0 < keep_percentile <= 100:
        raise ValueError(f"keep_percentile must lie in (0, 100], got {keep_percentile}")
    criterion = Criterion(criterion)
    names = prunable(model) if names is None else names
    masks = {n: layer_mask(score(model.params[n], criterion), keep_percentile) for n in names}
    return PruneMask(masks, keep_percentile, criterion)


def apply_mask(model: TrainedModel, mask: PruneMask) -> TrainedModel:
    """Copy of ``model`` whose masked coordinates are exactly zero in MAP and sampled forwards."""
    params = dict(model.params)
    for n, m in mask.masks.items():
        p = model.params[n]
        if m.shape != p.shape:
            raise ValueError(f"mask for {n} has shape {m.shape}, parameter has {p.shape}")
        combined = m if p.mask is None else (m & p.mask)
        q = VariationalParam.create(n, np.where(combined, p.mu.data, 0.0), p.log_var.data, p.bayesian)
        q.mask = combined
        params[n] = q
    return replace(model, params=params)


def effective_sparsity(model: TrainedModel, names=None) -> float:
    names = prunable(model) if names is None else names
    total = sum(model.params[n].mu.data.size for n in names)
    removed = sum(0 if model.params[n].mask is None else int(np.sum(~model.params[n].mask)) for n in names)
    return removed / total


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:12]


def sparsity_sweep(model: TrainedModel, probe: LinearProbe, data: Dataset, criteria=("snr", "magnitude"),
                   keep_grid=(100, 75, 50, 25, 10, 5, 1), audit: str = "") -> list[dict]:
    """Probe accuracy of the pruned (not retrained) encoder at every (criterion, keep%)."""
    rows = []
    for c in criteria:
        for keep in keep_grid:
            pruned = apply_mask(model, build_mask(model, c, keep))
            probs = _softmax_np(probe.logits(representations(pruned, data.images, "map")))
            rows.append({
                "criterion": Criterion(c).value,
                "keep_pct": float(keep),
                "top1": topk_accuracy(probs, data.labels, 1),
                "top5": topk_accuracy(probs, data.labels, 5),
                "effective_sparsity": effective_sparsity(pruned),
                "audit": audit,
            })
    return rows


def write_rows(path, rows: list[dict], comment: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        if not rows:
            return
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
