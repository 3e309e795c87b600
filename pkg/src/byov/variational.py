"""Mean-field Gaussian posterior over network parameters.

Each parameter tensor carries a mean ``mu`` and a log-variance ``log_var``
(variance = exp(log_var)).  Draws use the reparameterization
``w = mu + exp(log_var / 2) * eps`` so gradients reach both.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

INIT_LOG_VAR = -10.0
INIT_STD = 0.02


def layer_rng(seed: int, *keys) -> np.random.Generator:
    """Counter-style generator keyed by an integer seed plus string/int keys.

    Key order matters, iteration order of the caller does not.
    """
    words = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for k in keys:
        if isinstance(k, str):
            words.append(zlib.crc32(k.encode("utf-8")))
        else:
            words.append(int(k) & 0xFFFFFFFFFFFFFFFF)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))


def trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD, bound: float = 2.0) -> np.ndarray:
    """Normal(0, std) truncated at +-bound*std by resampling."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return out * std


@dataclass(eq=False)
class VariationalParam:
    mu: Tensor
    log_var: Tensor
    layer_id: str
    bayesian: bool = True
    # pruning mask; False coordinates are deterministic zeros
    mask: np.ndarray | None = None

    def __post_init__(self):
        if self.mu.shape != self.log_var.shape:
            raise ad.ShapeError(
                f"VariationalParam {self.layer_id}: mu {list(self.mu.shape)} vs log_var {list(self.log_var.shape)}"
            )
        self.mu.requires_grad = True
        self.log_var.requires_grad = self.bayesian

    @classmethod
    def create(cls, layer_id: str, mu: np.ndarray, log_var: float | np.ndarray = INIT_LOG_VAR,
               bayesian: bool = True) -> VariationalParam:
        mu = np.asarray(mu, dtype=np.float64)
        lv = np.broadcast_to(np.asarray(log_var, dtype=np.float64), mu.shape).copy()
        return cls(Tensor(mu), Tensor(lv), layer_id, bayesian)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.mu.shape

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(0.5 * self.log_var.data)

    def trainable(self) -> list[Tensor]:
        return [self.mu, self.log_var] if self.bayesian else [self.mu]


@dataclass
class PosteriorSample:
    weights: dict[str, Tensor]
    epsilon_seed: int | None = None

    def __getitem__(self, name: str) -> Tensor:
        return self.weights[name]


def sample(param: VariationalParam, seed: int) -> Tensor:
    """One reparameterized draw of ``param``, differentiable in mu and log_var."""
    if not param.bayesian:
        return param.mu
    eps = layer_rng(seed, param.layer_id).standard_normal(param.shape)
    if param.mask is not None:
        eps = eps * param.mask
    return ad.add(param.mu, ad.mul(ad.exp(ad.mul(param.log_var, 0.5)), Tensor(eps, op="const")))


def sample_weights(params: Mapping[str, VariationalParam], seed: int) -> PosteriorSample:
    return PosteriorSample({name: sample(p, seed) for name, p in params.items()}, seed)


def map_weights(param: VariationalParam) -> Tensor:
    """Posterior mode; for a Gaussian this is the mean."""
    return param.mu


def map_sample(params: Mapping[str, VariationalParam]) -> PosteriorSample:
    return PosteriorSample({name: p.mu for name, p in params.items()}, None)


def kl_gaussian(param: VariationalParam, prior_mu: np.ndarray | float = 0.0,
                prior_var: np.ndarray | float = 1.0) -> Tensor:
    """KL(q || p) between diagonal Gaussians, summed over coordinates."""
    prior_mu = np.asarray(prior_mu, dtype=np.float64)
    prior_var = np.asarray(prior_var, dtype=np.float64)
    for name, arr in (("prior mean", prior_mu), ("prior variance", prior_var)):
        if arr.ndim and arr.shape != param.shape:
            raise ad.ShapeError(
                f"kl_to_prior: {name} shape {list(arr.shape)} does not match {param.layer_id} {list(param.shape)}"
            )
    lv = param.log_var
    diff = ad.sub(param.mu, Tensor(np.broadcast_to(prior_mu, param.shape), op="const"))
    pv = Tensor(np.broadcast_to(prior_var, param.shape), op="const")
    ratio = ad.div(ad.add(ad.exp(lv), ad.square(diff)), pv)
    per_coord = ad.add(ad.sub(Tensor(np.log(pv.data), op="const"), lv), ad.sub(ratio, 1.0))
    return ad.mul(ad.sum_(per_coord), 0.5)


def snr(param: VariationalParam) -> np.ndarray:
    if not param.bayesian:
        raise ValueError(f"snr: layer {param.layer_id} is a point estimate; use magnitude instead")
    return np.abs(param.mu.data) / param.sigma


@dataclass(frozen=True)
class LayerStats:
    mean_sigma: float
    max_sigma: float
    mean_snr: float
    max_snr: float


def layer_stats(param: VariationalParam) -> LayerStats:
    sigma = param.sigma
    s = np.abs(param.mu.data) / sigma
    return LayerStats(float(sigma.mean()), float(sigma.max()), float(s.mean()), float(s.max()))


def num_parameters(params: Iterable[VariationalParam], bayesian_only: bool = False) -> int:
    return sum(int(p.mu.data.size) for p in params if p.bayesian or not bayesian_only)


def derive_seed(*keys) -> int:
    """Stable 63-bit integer seed from a tuple of ints/strings."""
    return int(layer_rng(*keys).integers(0, 2 ** 63 - 1)) if keys else 0
