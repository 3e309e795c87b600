"""Declarative experiment configuration.

One nested document (YAML or JSON) covers data, network, training, augmentation,
evaluation, pruning and ablation keys.  Unknown keys and ill-typed values are
rejected with the dotted key path of the offending entry.
"""

from __future__ import annotations

import copy
import dataclasses
import enum
import json
import os
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Union

import yaml

from .data import DEFAULT_LADDERS, AugmentConfig, Corruption, Dataset, load_idx_dataset, synthetic_dataset
from .model import NetworkSpec
from .priors import PriorKind
from .training import PriorConfig, ScheduleConfig, TrainConfig

REPO_ROOT = Path(__file__).resolve().parents[2]


class ConfigError(ValueError):
    """Invalid configuration; ``key`` is the dotted path of the offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}" if key else message)
        self.key = key
        self.message = message


@dataclass
class DataConfig:
    source: str = "idx"  # "idx" or "synthetic"
    train_images: str = "data/mnist5k/train-images-idx3-ubyte.gz"
    train_labels: str = "data/mnist5k/train-labels-idx1-ubyte.gz"
    test_images: str = "data/mnist5k/test-images-idx3-ubyte.gz"
    test_labels: str = "data/mnist5k/test-labels-idx1-ubyte.gz"
    # optional truncation (first n examples) for quick runs
    train_limit: int | None = None
    test_limit: int | None = None
    synthetic_train: int = 512
    synthetic_test: int = 256
    synthetic_classes: int = 4
    synthetic_shape: list[int] = field(default_factory=lambda: [1, 12, 12])
    synthetic_noise: float = 0.1
    synthetic_seed: int = 0


@dataclass
class EvalConfig:
    K: int = 50  # MC draws for calibration / OOD grid
    num_bins: int = 15
    probe_mode: str = "map"  # or "posterior_mean"
    probe_l2: float = 1e-2
    seed: int = 0
    std_compare_K: int = 200
    ablation_pool: int = 200  # posterior draws in the MC-ablation pool
    ablation_k_max: int = 50
    ablation_boot: int = 50
    ablation_images: int = 200
    latent_M: int = 50
    latent_images: int = 200
    latent_noise: list[float] = field(default_factory=lambda: list(DEFAULT_LADDERS[Corruption.GAUSSIAN_NOISE]))
    ood: dict[str, list[float]] = field(default_factory=lambda: {
        "gaussian_noise": list(DEFAULT_LADDERS[Corruption.GAUSSIAN_NOISE]),
        "salt_pepper": list(DEFAULT_LADDERS[Corruption.SALT_PEPPER]),
        "shear": list(DEFAULT_LADDERS[Corruption.SHEAR]),
    })
    # checkpoints to evaluate; empty means "train one from this config"
    checkpoint: str | None = None
    baseline_checkpoint: str | None = None  # deterministic BYOL (OOD grid)
    reference_checkpoint: str | None = None  # supervised BBB (std comparison)


@dataclass
class PruneConfig:
    criteria: list[str] = field(default_factory=lambda: ["snr", "magnitude"])
    keep_grid: list[float] = field(default_factory=lambda: [100.0, 75.0, 50.0, 25.0, 10.0, 5.0, 1.0])


@dataclass
class AblationConfig:
    priors: list[str] = field(default_factory=lambda: [k.value for k in PriorKind])
    # (beta_start, beta_end) pairs, each run with the single-cycle cosine
    beta_schedules: list[list[float]] = field(default_factory=lambda: [[0.0, 1.0], [0.0, 0.1], [1.0, 1.0], [0.0, 0.0]])


@dataclass
class ExperimentConfig:
    experiment_name: str = "byov"
    output_dir: str | None = None
    data: DataConfig = field(default_factory=DataConfig)
    network: NetworkSpec = field(default_factory=NetworkSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    pruning: PruneConfig = field(default_factory=PruneConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)


# (de)serialization -----------------------------------------------------------

def _plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, enum.Enum):
        return obj.value
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    return obj


def to_dict(cfg: ExperimentConfig) -> dict:
    return _plain(cfg)


def to_json(cfg: ExperimentConfig) -> str:
    return json.dumps(to_dict(cfg), sort_keys=True)


def _coerce(tp, value, path: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        errors = []
        for a in args:
            if a is type(None):
                continue
            try:
                return _coerce(a, value, path)
            except ConfigError as e:
                errors.append(e.message)
        raise ConfigError(path, "; ".join(errors))
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, path)
    if origin in (list, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(path, f"expected a list, got {type(value).__name__}")
        if origin is tuple and args and args[-1] is not Ellipsis:
            if len(value) != len(args):
                raise ConfigError(path, f"expected {len(args)} entries, got {len(value)}")
            return tuple(_coerce(a, v, f"{path}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
        inner = args[0] if args else Any
        out = [_coerce(inner, v, f"{path}[{i}]") for i, v in enumerate(value)]
        return tuple(out) if origin is tuple else out
    if origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(path, f"expected a mapping, got {type(value).__name__}")
        kt, vt = args or (Any, Any)
        return {_coerce(kt, k, path): _coerce(vt, v, f"{path}.{k}") for k, v in value.items()}
    if isinstance(tp, type) and issubclass(tp, enum.Enum):
        try:
            return tp(value)
        except ValueError:
            raise ConfigError(path, f"expected one of {[m.value for m in tp]}, got {value!r}") from None
    if tp is Any:
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected a boolean, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, str):
            # YAML 1.1 reads exponent literals without a dot (1e-3) as strings
            try:
                return float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    raise ConfigError(path, f"unsupported field type {tp!r}")


def _build(cls, raw, path: str):
    if not isinstance(raw, dict):
        raise ConfigError(path, f"expected a mapping, got {type(raw).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in raw:
        if key not in names:
            where = f"{path}.{key}" if path else str(key)
            raise ConfigError(where, f"unknown key (allowed: {', '.join(sorted(names))})")
    kwargs = {}
    for key, value in raw.items():
        where = f"{path}.{key}" if path else key
        kwargs[key] = _coerce(hints[key], value, where)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(path or "<root>", str(exc)) from None


def parse_value(text: str):
    """Value of a ``--set`` override, parsed as YAML (so 0.5, true, [1, 2] and null work)."""
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError:
        return text


def apply_override(raw: dict, assignment: str) -> dict:
    if "=" not in assignment:
        raise ConfigError(assignment, "override must look like key.path=value")
    key, text = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = raw
    for i, part in enumerate(parts[:-1]):
        nxt = node.get(part)
        if nxt is None:
            nxt = node[part] = {}
        if not isinstance(nxt, dict):
            raise ConfigError(".".join(parts[: i + 1]), "is not a section")
        node = nxt
    node[parts[-1]] = parse_value(text)
    return raw


def _validate(cfg: ExperimentConfig) -> None:
    if cfg.data.source not in ("idx", "synthetic"):
        raise ConfigError("data.source", f"expected 'idx' or 'synthetic', got {cfg.data.source!r}")
    try:
        PriorKind(cfg.train.prior.kind)
    except ValueError:
        raise ConfigError("train.prior.kind", f"expected one of {[k.value for k in PriorKind]}, "
                                              f"got {cfg.train.prior.kind!r}") from None
    if cfg.train.optimizer not in ("adam", "sgd"):
        raise ConfigError("train.optimizer", f"expected 'adam' or 'sgd', got {cfg.train.optimizer!r}")
    if cfg.train.prior.gamma is not None and not 0.0 <= cfg.train.prior.gamma < 1.0:
        raise ConfigError("train.prior.gamma", "must lie in [0, 1)")
    if not 0.0 <= cfg.train.tau <= 1.0:
        raise ConfigError("train.tau", "must lie in [0, 1]")
    if cfg.train.batch_size <= 0:
        raise ConfigError("train.batch_size", "must be positive")
    if cfg.train.epochs < 0:
        raise ConfigError("train.epochs", "must be non-negative")
    if isinstance(cfg.train.kl_scale, str) and cfg.train.kl_scale != "dataset":
        raise ConfigError("train.kl_scale", "must be a number or 'dataset'")
    if cfg.train.schedule.beta_start < 0 or cfg.train.schedule.beta_end < 0:
        raise ConfigError("train.schedule", "beta values must be non-negative")
    if cfg.evaluation.probe_mode not in ("map", "posterior_mean"):
        raise ConfigError("evaluation.probe_mode", "expected 'map' or 'posterior_mean'")
    if cfg.evaluation.K < 1:
        raise ConfigError("evaluation.K", "must be >= 1")
    if cfg.evaluation.latent_M < 2:
        raise ConfigError("evaluation.latent_M", "must be >= 2")
    for kind in cfg.evaluation.ood:
        try:
            Corruption(kind)
        except ValueError:
            raise ConfigError(f"evaluation.ood.{kind}", "unknown augmentation kind") from None
    for i, c in enumerate(cfg.pruning.criteria):
        if c not in ("snr", "magnitude"):
            raise ConfigError(f"pruning.criteria[{i}]", f"expected 'snr' or 'magnitude', got {c!r}")
    for i, k in enumerate(cfg.pruning.keep_grid):
        if not 0 < k <= 100:
            raise ConfigError(f"pruning.keep_grid[{i}]", "must lie in (0, 100]")
    for i, k in enumerate(cfg.ablation.priors):
        try:
            PriorKind(k)
        except ValueError:
            raise ConfigError(f"ablation.priors[{i}]", f"unknown prior {k!r}") from None
    for i, s in enumerate(cfg.ablation.beta_schedules):
        if len(s) != 2 or min(s) < 0:
            raise ConfigError(f"ablation.beta_schedules[{i}]", "expected [beta_start, beta_end] with both >= 0")


def from_dict(raw: dict) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, copy.deepcopy(raw or {}), "")
    _validate(cfg)
    return cfg


def read_raw(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError("--config", f"cannot read {path}: {exc.strerror}") from None
    try:
        raw = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError("--config", f"cannot parse {path}: {exc}") from None
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config document must be a mapping")
    return raw


def load_config(path=None, overrides=(), seed: int | None = None) -> ExperimentConfig:
    """File values, then ``--set`` overrides, then ``--seed`` (which sets train.seed)."""
    raw = read_raw(path) if path else {}
    for ov in overrides:
        raw = apply_override(raw, ov)
    if seed is not None:
        raw = apply_override(raw, f"train.seed={int(seed)}")
    return from_dict(raw)


# data ------------------------------------------------------------------------

def _resolve(p: str) -> Path:
    path = Path(p)
    if path.is_absolute() or path.exists():
        return path
    alt = REPO_ROOT / path
    return alt if alt.exists() else path


def load_splits(cfg: DataConfig) -> tuple[Dataset, Dataset]:
    if cfg.source == "synthetic":
        shape = tuple(cfg.synthetic_shape)
        train = synthetic_dataset(cfg.synthetic_train, cfg.synthetic_classes, cfg.synthetic_seed, shape,
                                  cfg.synthetic_noise, "train")
        test = synthetic_dataset(cfg.synthetic_test, cfg.synthetic_classes, cfg.synthetic_seed, shape,
                                 cfg.synthetic_noise, "test")
    else:
        train = load_idx_dataset(_resolve(cfg.train_images), _resolve(cfg.train_labels), "train")
        test = load_idx_dataset(_resolve(cfg.test_images), _resolve(cfg.test_labels), "test", train.num_classes)
    if cfg.train_limit:
        train = train.subset(slice(0, cfg.train_limit))
    if cfg.test_limit:
        test = test.subset(slice(0, cfg.test_limit))
    return train, test


def output_root(cfg: ExperimentConfig) -> Path:
    return Path(cfg.output_dir or os.environ.get("BYOV_OUT_DIR") or "runs")


__all__ = [
    "AblationConfig", "ConfigError", "DataConfig", "EvalConfig", "ExperimentConfig", "PruneConfig",
    "PriorConfig", "ScheduleConfig", "apply_override", "from_dict", "load_config", "load_splits",
    "output_root", "parse_value", "to_dict", "to_json",
]
