"""Weight priors: standard normal, teacher-centred, and teacher-centred with EMA variance."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .variational import VariationalParam, kl_gaussian

VAR_FLOOR = 1e-8


class PriorKind(str, enum.Enum):
    STANDARD_NORMAL = "standard_normal"
    TEACHER_MEAN = "teacher_mean"
    TEACHER_MEAN_VAR = "teacher_mean_var"


class ConfigError(ValueError):
    pass


@dataclass
class PriorSpec:
    """Prior state.

    ``mu_p``/``var_p`` hold per-parameter arrays for the names the teacher
    tracks.  Names without an entry (e.g. predictor layers, which have no
    teacher counterpart) fall back to N(0, 1).
    """

    kind: PriorKind = PriorKind.STANDARD_NORMAL
    gamma: float = 0.996
    var_floor: float = VAR_FLOOR
    mu_p: dict[str, np.ndarray] = field(default_factory=dict)
    var_p: dict[str, np.ndarray] = field(default_factory=dict)
    sq_ema: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.kind = PriorKind(self.kind)
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError(f"prior.gamma must lie in [0, 1), got {self.gamma}")
        if not self.var_floor > 0:
            raise ConfigError(f"prior.var_floor must be positive, got {self.var_floor}")

    def mean_for(self, name: str):
        return self.mu_p.get(name, 0.0)

    def var_for(self, name: str):
        return self.var_p.get(name, 1.0)


def init_prior(kind, teacher_weights: Mapping[str, np.ndarray], student_mu: Mapping[str, np.ndarray],
               gamma: float = 0.996, var_floor: float = VAR_FLOOR) -> PriorSpec:
    """Prior at step 0.  The second-moment EMA starts at the student's mu**2."""
    prior = PriorSpec(PriorKind(kind), gamma, var_floor)
    if prior.kind is PriorKind.STANDARD_NORMAL:
        return prior
    prior.mu_p = {k: np.array(v) for k, v in teacher_weights.items()}
    if prior.kind is PriorKind.TEACHER_MEAN_VAR:
        prior.sq_ema = {k: np.square(student_mu[k]) for k in teacher_weights}
        prior.var_p = {k: np.maximum(np.square(teacher_weights[k]) - prior.sq_ema[k], var_floor)
                       for k in teacher_weights}
    return prior


def update_prior(prior: PriorSpec, teacher_weights: Mapping[str, np.ndarray],
                 student_mu: Mapping[str, np.ndarray]) -> PriorSpec:
    """Advance the prior by one optimizer step (called after the teacher update)."""
    if prior.kind is PriorKind.STANDARD_NORMAL:
        return prior
    mu_p = {k: np.array(v) for k, v in teacher_weights.items()}
    if prior.kind is PriorKind.TEACHER_MEAN:
        return replace(prior, mu_p=mu_p)
    g = prior.gamma
    sq = {}
    for k in teacher_weights:
        s2 = np.square(student_mu[k])
        prev = prior.sq_ema.get(k, s2)
        sq[k] = g * prev + (1.0 - g) * s2
    var_p = {k: np.maximum(np.square(teacher_weights[k]) - sq[k], prior.var_floor) for k in teacher_weights}
    return replace(prior, mu_p=mu_p, sq_ema=sq, var_p=var_p)


def kl_to_prior(params: Mapping[str, VariationalParam], prior: PriorSpec) -> ad.Tensor:
    """Closed-form KL summed over every coordinate of every Bayesian parameter."""
    terms = [kl_gaussian(p, prior.mean_for(name), prior.var_for(name))
             for name, p in params.items() if p.bayesian]
    if not terms:
        return ad.Tensor(0.0, op="const")
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return total


def prior_state(prior: PriorSpec) -> dict[str, np.ndarray]:
    out = {}
    for group in ("mu_p", "var_p", "sq_ema"):
        for k, v in getattr(prior, group).items():
            out[f"prior/{group}/{k}"] = v
    return out


def restore_prior_state(prior: PriorSpec, tensors: Mapping[str, np.ndarray]) -> PriorSpec:
    groups: dict[str, dict[str, np.ndarray]] = {"mu_p": {}, "var_p": {}, "sq_ema": {}}
    for key, v in tensors.items():
        if key.startswith("prior/"):
            _, group, name = key.split("/", 2)
            groups[group][name] = np.array(v)
    return replace(prior, **groups)
