"""Generalized-ELBO training for BYOV plus the deterministic-BYOL and supervised-BBB baselines.

Per-example objective minimized at every step::

    total = distillation_loss(w ~ q) + beta * kl_scale * KL(q || prior)

``kl_scale`` defaults to 1 / N_train, i.e. the dataset-level objective
divided by the number of training examples.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterator

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt
from .data import AugmentConfig, Dataset, epoch_batches, two_views
from .model import (
    BayesianScope,
    NetworkSpec,
    TeacherState,
    byol_loss,
    classify,
    init_params,
    init_teacher,
    map_forward,
    param_arrays,
    params_from_arrays,
    student_forward,
    teacher_forward,
    update_teacher,
)
from .optim import make_optimizer
from .priors import PriorKind, PriorSpec, init_prior, kl_to_prior, prior_state, restore_prior_state, update_prior
from .variational import VariationalParam, derive_seed, layer_stats, sample_weights

MODES = ("byov", "byol", "supervised")


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class BetaSchedule:
    beta_start: float = 0.0
    beta_end: float = 1.0
    total_steps: int = 1

    def __post_init__(self):
        if self.beta_start < 0 or self.beta_end < 0:
            raise ValueError("beta values must be non-negative")
        if self.total_steps <= 0:
            raise ValueError("total_steps must be positive")


def beta_at(schedule: BetaSchedule, step: int) -> float:
    """Single-cycle cosine from beta_start to beta_end; steps outside [0, T] clamp to the endpoints."""
    t, T = step, schedule.total_steps
    if t <= 0:
        return schedule.beta_start
    if t >= T:
        return schedule.beta_end
    frac = (1.0 - math.cos(math.pi * t / T)) / 2.0
    return schedule.beta_start + (schedule.beta_end - schedule.beta_start) * frac


@dataclass
class PriorConfig:
    kind: str = "standard_normal"
    gamma: float | None = None  # defaults to tau
    var_floor: float = 1e-8


@dataclass
class ScheduleConfig:
    beta_start: float = 0.0
    beta_end: float = 1.0
    total_steps: int | None = None  # defaults to epochs * steps_per_epoch


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    betas: tuple[float, float] = (0.9, 0.999)
    batch_size: int = 128
    epochs: int = 10
    seed: int = 0
    tau: float = 0.99
    weight_decay: float = 0.0
    kl_scale: str | float = "dataset"
    init_log_var: float = -10.0
    log_var_lr_scale: float = 1.0
    predictor_lr_scale: float = 10.0
    prior: PriorConfig = field(default_factory=PriorConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)


@dataclass
class MetricsRecord:
    kind: str  # "step" or "epoch"
    step: int
    epoch: int
    loss: float
    distill: float
    kl: float
    kl_raw: float
    beta: float
    accuracy: float | None = None
    layers: dict | None = None
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        d = {k: v for k, v in asdict(self).items() if v is not None and v != {}}
        return json.dumps(d, sort_keys=True)


@dataclass
class TrainedModel:
    """Everything evaluation needs from a finished run."""

    spec: NetworkSpec
    params: dict[str, VariationalParam]
    mode: str
    teacher: TeacherState | None = None
    num_classes: int | None = None
    data_fingerprint: str | None = None
    meta: dict = field(default_factory=dict)

    @property
    def is_bayesian(self) -> bool:
        return any(p.bayesian for p in self.params.values())


def _spec_to_dict(spec: NetworkSpec) -> dict:
    d = asdict(spec)
    d["bayesian_scope"] = spec.bayesian_scope.value
    d["input_shape"] = list(spec.input_shape)
    return d


class Trainer:
    def __init__(self, spec: NetworkSpec, cfg: TrainConfig, data: Dataset, mode: str = "byov",
                 augment: AugmentConfig | None = None):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        if mode == "byol":
            spec = replace(spec, bayesian_scope=BayesianScope.NONE)
        if cfg.weight_decay and spec.bayesian_scope is not BayesianScope.NONE:
            raise ValueError("train.weight_decay must be 0 when any layer is Bayesian")
        if mode == "supervised" and data.labels is None:
            raise ValueError("supervised training needs labels")
        self.spec = spec
        self.cfg = cfg
        self.data = data
        self.mode = mode
        self.augment = augment or AugmentConfig()
        self.num_classes = data.num_classes if mode == "supervised" else None
        ssl = mode != "supervised"
        self.params = init_params(spec, cfg.seed, self.num_classes, with_ssl_heads=ssl, log_var=cfg.init_log_var)
        self.teacher = init_teacher(spec, self.params, cfg.tau) if ssl else None
        prior_kind = PriorKind(cfg.prior.kind)
        if not ssl and prior_kind is not PriorKind.STANDARD_NORMAL:
            raise ValueError("supervised BBB has no teacher; use prior.kind = standard_normal")
        gamma = cfg.tau if cfg.prior.gamma is None else cfg.prior.gamma
        self.prior = init_prior(prior_kind, self.teacher.weights if ssl else {},
                                {n: p.mu.data for n, p in self.params.items()}, gamma, cfg.prior.var_floor)
        tensors = {}
        for n, p in self.params.items():
            tensors[f"mu/{n}"] = p.mu
            if p.bayesian:
                tensors[f"log_var/{n}"] = p.log_var
        scales = {k: cfg.log_var_lr_scale for k in tensors if k.startswith("log_var/")}
        for k in tensors:
            if k.split("/", 1)[1].startswith("predictor."):
                scales[k] = scales.get(k, 1.0) * cfg.predictor_lr_scale
        self.optimizer = make_optimizer(cfg.optimizer, tensors, cfg.lr, cfg.momentum, cfg.betas, cfg.weight_decay,
                                        scales)
        self.steps_per_epoch = len(epoch_batches(len(data), cfg.batch_size, cfg.seed, 0))
        total = cfg.schedule.total_steps or cfg.epochs * self.steps_per_epoch
        self.schedule = BetaSchedule(cfg.schedule.beta_start, cfg.schedule.beta_end, total)
        self.kl_scale = 1.0 / len(data) if cfg.kl_scale == "dataset" else float(cfg.kl_scale)
        self.step = 0
        self._probe_idx = np.arange(min(256, len(data)))

    # ------------------------------------------------------------------
    @property
    def epoch(self) -> int:
        return self.step // self.steps_per_epoch

    def beta(self, step: int | None = None) -> float:
        if self.mode == "byol":
            return 0.0
        return beta_at(self.schedule, self.step if step is None else step)

    def batch_for_step(self, step: int):
        epoch, b = divmod(step, self.steps_per_epoch)
        idx = epoch_batches(len(self.data), self.cfg.batch_size, self.cfg.seed, epoch)[b]
        images = self.data.images[idx]
        if self.mode == "supervised":
            return images, self.data.labels[idx]
        return two_views(images, derive_seed(self.cfg.seed, "augment", step), self.augment)

    def _objective(self, batch, sample):
        if self.mode == "supervised":
            images, labels = batch
            logits = classify(self.spec, sample.weights, images)
            onehot = np.eye(self.num_classes)[labels]
            nll = ad.mul(ad.mean(ad.sum_(ad.mul(ad.log_softmax(logits), onehot), axis=-1)), -1.0)
            acc = float(np.mean(logits.data.argmax(axis=1) == labels))
            return nll, acc
        x1, x2 = batch
        _, _, p1 = student_forward(self.spec, x1, sample)
        _, _, p2 = student_forward(self.spec, x2, sample)
        z1_t = teacher_forward(self.spec, x1, self.teacher)
        z2_t = teacher_forward(self.spec, x2, self.teacher)
        return byol_loss(p1, z2_t, p2, z1_t), None

    def train_step(self, batch=None) -> MetricsRecord:
        """One posterior draw, objective backward, optimizer step, then teacher and prior updates."""
        step = self.step
        batch = self.batch_for_step(step) if batch is None else batch
        beta = self.beta(step)
        self.optimizer.zero_grad()
        try:
            sample = sample_weights(self.params, derive_seed(self.cfg.seed, "posterior", step))
            distill, acc = self._objective(batch, sample)
            kl_raw = kl_to_prior(self.params, self.prior)
            kl = ad.mul(kl_raw, self.kl_scale)
            total = ad.add(distill, ad.mul(kl, beta))
            ad.backward(total)
        except ad.NonFiniteError as exc:
            raise TrainingDiverged(f"step {step}: {exc}") from exc
        for name, t in self.optimizer.params.items():
            if t.grad is not None and not np.isfinite(t.grad).all():
                raise TrainingDiverged(f"step {step}: non-finite gradient for '{name}'")
        self.optimizer.step()
        for name, t in self.optimizer.params.items():
            if not np.isfinite(t.data).all():
                raise TrainingDiverged(f"step {step}: non-finite parameter '{name}' after update")
        if self.teacher is not None:
            self.teacher = update_teacher(self.teacher, self.params)
            self.prior = update_prior(self.prior, self.teacher.weights,
                                      {n: self.params[n].mu.data for n in self.teacher.weights})
        self.step += 1
        d, k = distill.item(), kl.item()
        return MetricsRecord("step", step, step // self.steps_per_epoch, total.item(), d, k,
                             kl_raw.item(), beta, acc)

    def epoch_record(self, records: list[MetricsRecord]) -> MetricsRecord:
        layers = {n: asdict(layer_stats(p)) for n, p in self.params.items() if p.bayesian}
        extra = {}
        if self.teacher is not None:
            x = self.data.images[self._probe_idx]
            _, z_s = map_forward(self.spec, self.params, x)
            z_t = teacher_forward(self.spec, x, self.teacher)
            extra["teacher_proj_min_std"] = float(z_t.data.std(axis=0).min())
            extra["teacher_student_cos"] = float(ad.cosine_similarity(z_s, z_t).data.mean())
        accs = [r.accuracy for r in records if r.accuracy is not None]
        return MetricsRecord(
            "epoch", self.step, records[-1].epoch,
            float(np.mean([r.loss for r in records])),
            float(np.mean([r.distill for r in records])),
            float(np.mean([r.kl for r in records])),
            float(np.mean([r.kl_raw for r in records])),
            records[-1].beta,
            float(np.mean(accs)) if accs else None,
            layers or None,
            extra,
        )

    def fit(self, epochs: int | None = None, sink: Callable[[MetricsRecord], None] | None = None,
            on_epoch: Callable[[Trainer], None] | None = None) -> list[MetricsRecord]:
        """Train until ``epochs`` total epochs are complete (resumes mid-run)."""
        epochs = self.cfg.epochs if epochs is None else epochs
        out: list[MetricsRecord] = []
        target = epochs * self.steps_per_epoch
        current: list[MetricsRecord] = []
        while self.step < target:
            rec = self.train_step()
            current.append(rec)
            out.append(rec)
            if sink:
                sink(rec)
            if self.step % self.steps_per_epoch == 0:
                erec = self.epoch_record(current)
                out.append(erec)
                if sink:
                    sink(erec)
                if on_epoch:
                    on_epoch(self)
                current = []
        return out

    # ------------------------------------------------------------------
    def meta(self) -> dict:
        return {
            "mode": self.mode,
            "step": self.step,
            "network": _spec_to_dict(self.spec),
            "num_classes": self.num_classes,
            "tau": self.cfg.tau,
            "data_fingerprint": self.data.fingerprint(),
        }

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = param_arrays(self.params)
        if self.teacher is not None:
            out.update({f"teacher/{n}": w for n, w in self.teacher.weights.items()})
        out.update(prior_state(self.prior))
        out.update({f"optim/{k}": v for k, v in self.optimizer.state_dict().items()})
        out["step"] = np.array(float(self.step))
        return out

    def save(self, path, extra_meta: dict | None = None) -> None:
        meta = self.meta()
        if extra_meta:
            meta.update(extra_meta)
        ckpt.save_checkpoint(path, self.state_arrays(), meta)

    def load_state(self, tensors: dict[str, np.ndarray]) -> None:
        for n, p in self.params.items():
            p.mu.data[...] = tensors[f"mu/{n}"]
            p.log_var.data[...] = tensors[f"log_var/{n}"]
        if self.teacher is not None:
            self.teacher = TeacherState({n: np.array(tensors[f"teacher/{n}"]) for n in self.teacher.weights},
                                        self.teacher.tau)
        self.prior = restore_prior_state(self.prior, tensors)
        self.optimizer.load_state_dict({k[6:]: v for k, v in tensors.items() if k.startswith("optim/")})
        self.step = int(tensors["step"])

    def resume(self, path) -> None:
        tensors, meta = ckpt.load_checkpoint(path)
        if meta.get("mode") != self.mode:
            raise ValueError(f"checkpoint mode {meta.get('mode')!r} does not match trainer mode {self.mode!r}")
        self.load_state(tensors)

    def model(self) -> TrainedModel:
        return TrainedModel(self.spec, self.params, self.mode, self.teacher, self.num_classes,
                            self.data.fingerprint(), self.meta())


def load_model(path) -> TrainedModel:
    tensors, meta = ckpt.load_checkpoint(path)
    spec = NetworkSpec(**meta["network"])
    params = params_from_arrays(tensors)
    teacher = None
    tw = {k[len("teacher/"):]: v for k, v in tensors.items() if k.startswith("teacher/")}
    if tw:
        teacher = TeacherState(tw, meta.get("tau", 0.996))
    return TrainedModel(spec, params, meta["mode"], teacher, meta.get("num_classes"),
                        meta.get("data_fingerprint"), meta)


def save_model(path, model: TrainedModel, extra_meta: dict | None = None) -> None:
    arrays = param_arrays(model.params)
    if model.teacher is not None:
        arrays.update({f"teacher/{n}": w for n, w in model.teacher.weights.items()})
    meta = dict(model.meta)
    meta.update({"mode": model.mode, "network": _spec_to_dict(model.spec), "num_classes": model.num_classes,
                 "data_fingerprint": model.data_fingerprint})
    if extra_meta:
        meta.update(extra_meta)
    ckpt.save_checkpoint(path, arrays, meta)


def train_byov(spec: NetworkSpec, cfg: TrainConfig, data: Dataset, augment: AugmentConfig | None = None,
               sink=None) -> Trainer:
    tr = Trainer(spec, cfg, data, "byov", augment)
    tr.fit(sink=sink)
    return tr


def train_deterministic_byol(spec: NetworkSpec, cfg: TrainConfig, data: Dataset,
                             augment: AugmentConfig | None = None, sink=None) -> Trainer:
    tr = Trainer(spec, cfg, data, "byol", augment)
    tr.fit(sink=sink)
    return tr


def train_supervised_bbb(spec: NetworkSpec, cfg: TrainConfig, data: Dataset, sink=None) -> Trainer:
    tr = Trainer(spec, cfg, data, "supervised")
    tr.fit(sink=sink)
    return tr
