"""Student/teacher networks and the symmetric distillation loss."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .variational import (
    INIT_LOG_VAR,
    PosteriorSample,
    VariationalParam,
    layer_rng,
    map_sample,
    trunc_normal,
)

NORMALIZE_EPS = 1e-12


class BayesianScope(str, enum.Enum):
    ALL = "all"
    NO_CONV = "no_conv"
    LINEAR_ONLY = "linear_only"
    NONE = "none"

    def is_bayesian(self, kind: str) -> bool:
        if self is BayesianScope.ALL:
            return True
        if self is BayesianScope.NO_CONV:
            return kind != "conv"
        if self is BayesianScope.LINEAR_ONLY:
            return kind == "linear"
        return False


@dataclass
class NetworkSpec:
    input_shape: tuple[int, int, int] = (1, 28, 28)
    encoder_hidden: list[int] = field(default_factory=lambda: [256, 128])
    nonlinearity: str = "relu"
    layer_norm: bool = True
    # LayerNorm inside the projector/predictor hidden layers
    head_layer_norm: bool = True
    # optional strided patch-embedding front end (kernel == stride == patch_size)
    patch_size: int | None = None
    patch_channels: int = 8
    projector: list[int] = field(default_factory=lambda: [256, 128])
    predictor: list[int] = field(default_factory=lambda: [256, 128])
    bayesian_scope: BayesianScope = BayesianScope.ALL

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        self.bayesian_scope = BayesianScope(self.bayesian_scope)
        if self.nonlinearity not in ("relu", "tanh"):
            raise ValueError(f"network.nonlinearity must be 'relu' or 'tanh', got {self.nonlinearity!r}")
        if len(self.projector) != 2 or len(self.predictor) != 2:
            raise ValueError("network.projector and network.predictor are two-layer MLPs: [hidden, out]")
        if not self.projector[-1] == self.predictor[-1]:
            raise ValueError(
                f"projector output {self.projector[-1]} must equal predictor output {self.predictor[-1]}"
            )
        if self.patch_size:
            c, h, w = self.input_shape
            if h % self.patch_size or w % self.patch_size:
                raise ValueError(f"image {h}x{w} not divisible by patch_size {self.patch_size}")

    def uses_norm(self, prefix: str) -> bool:
        if prefix.startswith(("projector.", "predictor.")):
            return self.layer_norm and self.head_layer_norm
        return self.layer_norm

    @property
    def input_dim(self) -> int:
        c, h, w = self.input_shape
        return c * h * w

    @property
    def representation_dim(self) -> int:
        return self.encoder_hidden[-1]

    def _stem_dim(self) -> int:
        if not self.patch_size:
            return self.input_dim
        c, h, w = self.input_shape
        return (h // self.patch_size) * (w // self.patch_size) * self.patch_channels

    def layout(self, num_classes: int | None = None, with_ssl_heads: bool = True) -> list[tuple[str, str, tuple]]:
        """(name, kind, shape) for every parameter tensor, in forward order."""
        out: list[tuple[str, str, tuple]] = []

        def linear(prefix, d_in, d_out):
            out.append((f"{prefix}.weight", "linear", (d_in, d_out)))
            out.append((f"{prefix}.bias", "linear", (d_out,)))

        def norm(prefix, d):
            if self.uses_norm(prefix):
                out.append((f"{prefix}.ln.gain", "norm", (d,)))
                out.append((f"{prefix}.ln.shift", "norm", (d,)))

        if self.patch_size:
            c = self.input_shape[0]
            out.append(("encoder.patch.weight", "conv", (c * self.patch_size ** 2, self.patch_channels)))
            out.append(("encoder.patch.bias", "conv", (self.patch_channels,)))
        d = self._stem_dim()
        for i, h in enumerate(self.encoder_hidden):
            linear(f"encoder.{i}", d, h)
            norm(f"encoder.{i}", h)
            d = h
        if with_ssl_heads:
            linear("projector.0", d, self.projector[0])
            norm("projector.0", self.projector[0])
            linear("projector.1", self.projector[0], self.projector[1])
            linear("predictor.0", self.projector[1], self.predictor[0])
            norm("predictor.0", self.predictor[0])
            linear("predictor.1", self.predictor[0], self.predictor[1])
        if num_classes is not None:
            linear("head", d, num_classes)
        return out


def init_params(spec: NetworkSpec, seed: int, num_classes: int | None = None,
                with_ssl_heads: bool = True, log_var: float = INIT_LOG_VAR) -> dict[str, VariationalParam]:
    """Weights ~ truncated normal(std 0.02), biases/shifts 0, gains 1, log-variance -10.

    Initial means depend only on (seed, parameter name), so models that differ
    only in Bayesian scope start from identical means.
    """
    params = {}
    for name, kind, shape in spec.layout(num_classes, with_ssl_heads):
        if name.endswith(".weight"):
            mu = trunc_normal(layer_rng(seed, "init", name), shape)
        elif name.endswith(".gain"):
            mu = np.ones(shape)
        else:
            mu = np.zeros(shape)
        params[name] = VariationalParam.create(name, mu, log_var, spec.bayesian_scope.is_bayesian(kind))
    return params


def _act(spec: NetworkSpec, x: Tensor) -> Tensor:
    return ad.relu(x) if spec.nonlinearity == "relu" else ad.tanh(x)


def _linear(w: Mapping[str, Tensor], prefix: str, x: Tensor) -> Tensor:
    return ad.add(ad.matmul(x, w[f"{prefix}.weight"]), w[f"{prefix}.bias"])


def _norm(spec: NetworkSpec, w: Mapping[str, Tensor], prefix: str, x: Tensor) -> Tensor:
    if not spec.uses_norm(prefix):
        return x
    return ad.layer_norm(x, w[f"{prefix}.ln.gain"], w[f"{prefix}.ln.shift"])


def _as_input(spec: NetworkSpec, x) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64), op="input")
    n = x.shape[0]
    if x.ndim == 4 and x.shape[1:] != spec.input_shape or x.ndim == 2 and x.shape[1] != spec.input_dim:
        raise ad.ShapeError(f"input: expected images of shape {list(spec.input_shape)}, got {list(x.shape)}")
    if spec.patch_size:
        if x.ndim == 2:
            x = ad.reshape(x, (n, *spec.input_shape))
        return x
    return ad.reshape(x, (n, spec.input_dim)) if x.ndim != 2 else x


def encode(spec: NetworkSpec, w: Mapping[str, Tensor], x) -> Tensor:
    x = _as_input(spec, x)
    n = x.shape[0]
    if spec.patch_size:
        patches = ad.patchify(x, spec.patch_size)
        emb = _linear(w, "encoder.patch", patches)
        x = ad.reshape(emb, (n, spec._stem_dim()))
    for i in range(len(spec.encoder_hidden)):
        x = _act(spec, _norm(spec, w, f"encoder.{i}", _linear(w, f"encoder.{i}", x)))
    return x


def project(spec: NetworkSpec, w: Mapping[str, Tensor], h: Tensor) -> Tensor:
    z = _act(spec, _norm(spec, w, "projector.0", _linear(w, "projector.0", h)))
    return _linear(w, "projector.1", z)


def predict(spec: NetworkSpec, w: Mapping[str, Tensor], z: Tensor) -> Tensor:
    p = _act(spec, _norm(spec, w, "predictor.0", _linear(w, "predictor.0", z)))
    return _linear(w, "predictor.1", p)


def classify(spec: NetworkSpec, w: Mapping[str, Tensor], x) -> Tensor:
    return _linear(w, "head", encode(spec, w, x))


@dataclass
class TeacherState:
    weights: dict[str, np.ndarray]
    tau: float = 0.996

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must lie in [0, 1], got {self.tau}")


def teacher_names(spec: NetworkSpec) -> list[str]:
    return [n for n, _, _ in spec.layout() if n.startswith(("encoder.", "projector."))]


def init_teacher(spec: NetworkSpec, params: Mapping[str, VariationalParam], tau: float) -> TeacherState:
    return TeacherState({n: params[n].mu.data.copy() for n in teacher_names(spec)}, tau)


def update_teacher(teacher: TeacherState, params: Mapping[str, VariationalParam]) -> TeacherState:
    """EMA of the student means for every encoder/projector tensor."""
    t = teacher.tau
    new = {n: t * w + (1.0 - t) * params[n].mu.data for n, w in teacher.weights.items()}
    return TeacherState(new, t)


def student_forward(spec: NetworkSpec, x, sample: PosteriorSample) -> tuple[Tensor, Tensor, Tensor]:
    """Returns (representation, projection, L2-normalized prediction)."""
    h = encode(spec, sample.weights, x)
    z = project(spec, sample.weights, h)
    p = predict(spec, sample.weights, z)
    return h, z, ad.normalize(p, NORMALIZE_EPS)


def teacher_forward(spec: NetworkSpec, x, teacher: TeacherState) -> Tensor:
    """Teacher projection; never recorded on the tape."""
    with ad.no_grad():
        w = {n: Tensor(v, op="teacher") for n, v in teacher.weights.items()}
        return project(spec, w, encode(spec, w, x))


def pair_loss(p: Tensor, z: Tensor) -> Tensor:
    """Batch mean of 2 - 2 cos(p, z)."""
    return ad.mean(ad.sub(2.0, ad.mul(ad.cosine_similarity(p, z, NORMALIZE_EPS), 2.0)))


def byol_loss(p1: Tensor, z2_t: Tensor, p2: Tensor, z1_t: Tensor) -> Tensor:
    """Symmetrized distillation loss in [0, 8]."""
    for a, b in ((p1, z2_t), (p2, z1_t), (p1, p2)):
        if a.shape != b.shape:
            raise ad.ShapeError(f"byol_loss: incompatible shapes {list(a.shape)} and {list(b.shape)}")
    return ad.add(pair_loss(p1, z2_t), pair_loss(p2, z1_t))


def map_forward(spec: NetworkSpec, params: Mapping[str, VariationalParam], x) -> tuple[Tensor, Tensor]:
    """Student (encoder, projection) at the posterior means, without tape."""
    with ad.no_grad():
        s = map_sample(params)
        h = encode(spec, s.weights, x)
        return h, project(spec, s.weights, h)


def stage_outputs(spec: NetworkSpec, weights: Mapping[str, Tensor], x) -> dict[str, np.ndarray]:
    with ad.no_grad():
        h = encode(spec, weights, x)
        z = project(spec, weights, h)
        p = predict(spec, weights, z)
    return {"encoder": h.data, "projector": z.data, "predictor": p.data}


def param_arrays(params: Mapping[str, VariationalParam]) -> dict[str, np.ndarray]:
    out = {}
    for n, p in params.items():
        out[f"mu/{n}"] = p.mu.data
        out[f"log_var/{n}"] = p.log_var.data
        out[f"bayesian/{n}"] = np.array(float(p.bayesian))
        if p.mask is not None:
            out[f"mask/{n}"] = p.mask.astype(np.float64)
    return out


def params_from_arrays(tensors: Mapping[str, np.ndarray]) -> dict[str, VariationalParam]:
    params = {}
    for key, mu in tensors.items():
        if not key.startswith("mu/"):
            continue
        n = key[3:]
        p = VariationalParam.create(n, mu, tensors[f"log_var/{n}"], bool(tensors[f"bayesian/{n}"]))
        if f"mask/{n}" in tensors:
            p.mask = tensors[f"mask/{n}"].astype(bool)
        params[n] = p
    return params


def output_names(params: Mapping[str, VariationalParam], prefixes: Sequence[str]) -> list[str]:
    return [n for n in params if n.startswith(tuple(prefixes))]
