"""Command-line entry point: ``byov <subcommand> --config FILE [--set k=v ...]``.

Every run writes a self-describing directory ``<root>/<experiment_name>/<subcommand>``
where ``<root>`` is ``output_dir`` from the config, else ``$BYOV_OUT_DIR``, else
``./runs``.  The directory holds ``config.json``, ``metrics.jsonl`` (first record
is the full config), CSV tables (first line is a ``# config: ...`` comment) and
``.byov`` checkpoints whose metadata embeds the config.

Exit codes: 0 success, 1 other runtime error, 2 invalid config (the key path is
reported), 3 non-finite values during training, 4 output directory collision.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import math
import shutil
import sys
import warnings
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from . import checkpoint as ckpt
from . import evaluation as ev
from . import pruning as pr
from .config import ConfigError, ExperimentConfig, load_config, load_splits, output_root, to_dict
from .data import AugmentationSpec, Corruption, Dataset, apply_ood
from .training import (
    ScheduleConfig,
    TrainedModel,
    Trainer,
    TrainingDiverged,
    load_model,
    save_model,
)
from .variational import derive_seed

log = logging.getLogger("byov")

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_NAN, EXIT_EXISTS = 0, 1, 2, 3, 4


class OutputExists(RuntimeError):
    pass


def _clean(obj):
    """JSON-safe copy: numpy scalars become Python numbers, non-finite floats become null."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, np.generic):
        obj = obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def _dumps(obj) -> str:
    return json.dumps(_clean(obj), sort_keys=True)


class Run:
    """Output directory of one subcommand invocation."""

    def __init__(self, cfg: ExperimentConfig, command: str, force: bool = False, resuming: bool = False):
        self.cfg = cfg
        self.command = command
        self.config = to_dict(cfg)
        self.dir = output_root(cfg) / cfg.experiment_name / command
        if self.dir.exists() and any(self.dir.iterdir()):
            if force:
                shutil.rmtree(self.dir)
            elif not resuming:
                raise OutputExists(f"output directory {self.dir} is not empty (use --force to overwrite)")
        self.dir.mkdir(parents=True, exist_ok=True)
        (self.dir / "config.json").write_text(json.dumps(self.config, indent=2, sort_keys=True) + "\n")
        self.metrics_path = self.dir / "metrics.jsonl"

    @property
    def header(self) -> dict:
        return {"kind": "config", "command": self.command, "version": __version__, "config": self.config}

    def start_metrics(self, keep=None) -> None:
        """Write the header record; ``keep`` filters records retained from an earlier (resumed) file."""
        lines = [_dumps(self.header)]
        if keep is not None and self.metrics_path.exists():
            old = self.metrics_path.read_text().splitlines()[1:]
            lines += [ln for ln in old if keep(json.loads(ln))]
        self.metrics_path.write_text("\n".join(lines) + "\n")

    def record(self, rec) -> None:
        line = rec.to_json() if hasattr(rec, "to_json") else _dumps(rec)
        with open(self.metrics_path, "a") as fh:
            fh.write(line + "\n")

    def sub_metrics(self, name: str):
        """Sink writing a separate JSONL for an auxiliary training run."""
        path = self.dir / f"{name}.jsonl"
        path.write_text(_dumps(dict(self.header, kind="config", model=name)) + "\n")

        def sink(rec):
            with open(path, "a") as fh:
                fh.write(rec.to_json() + "\n")
        return sink

    def csv(self, name: str, rows: list[dict]) -> Path:
        path = self.dir / name
        pr.write_rows(path, rows, "config: " + json.dumps(self.config, sort_keys=True))
        return path

    def fail(self, kind: str, message: str, **extra) -> dict:
        rec = {"kind": "error", "error": kind, "message": message, **extra}
        with open(self.metrics_path, "a") as fh:
            fh.write(_dumps(rec) + "\n")
        (self.dir / "error.json").write_text(_dumps(rec) + "\n")
        return rec


# models ----------------------------------------------------------------------

def _train(run: Run, cfg: ExperimentConfig, mode: str, train: Dataset, sink, on_epoch=None,
           resume: str | None = None) -> Trainer:
    tr = Trainer(cfg.network, cfg.train, train, mode, cfg.augment)
    if resume:
        tr.resume(resume)
    tr.fit(sink=sink, on_epoch=on_epoch)
    return tr


def _obtain(run: Run, cfg: ExperimentConfig, mode: str, path: str | None, train: Dataset,
            accept: tuple[str, ...] = ()) -> TrainedModel:
    """Load the checkpoint at ``path`` (mode ``mode`` or one of ``accept``) or train a ``mode`` model."""
    if path:
        model = load_model(path)
        if model.mode != mode and model.mode not in accept:
            raise ConfigError("evaluation", f"checkpoint {path} holds a {model.mode!r} model, expected {mode!r}")
        run.record({"kind": "model", "name": mode, "source": str(path), "fingerprint": model.data_fingerprint})
        return model
    log.info("training %s model for %s", mode, run.command)
    tr = _train(run, cfg, mode, train, run.sub_metrics(f"train-{mode}"))
    model = tr.model()
    (run.dir / "models").mkdir(exist_ok=True)
    save_model(run.dir / "models" / f"{mode}.byov", model, {"config": run.config})
    run.record({"kind": "model", "name": mode, "source": "trained", "steps": tr.step,
                "fingerprint": model.data_fingerprint})
    return model


def _probe(cfg: ExperimentConfig, model: TrainedModel, train: Dataset):
    if model.mode == "supervised":
        return None
    e = cfg.evaluation
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        probe = ev.fit_linear_probe(model, train, e.probe_mode, seed=e.seed, l2=e.probe_l2)
    for w in caught:
        log.warning("%s", w.message)
    return probe


def _calib_row(report: ev.CalibrationReport, **keys) -> dict:
    return {**keys, **report.row()}


# subcommands -----------------------------------------------------------------

def _cmd_train(mode: str):
    def cmd(run: Run, cfg: ExperimentConfig, args) -> None:
        train, test = load_splits(cfg.data)
        resume_step = None
        if args.resume:
            tensors, meta = ckpt.load_checkpoint(args.resume)
            _check_resume(cfg, meta, args.resume)
            resume_step = int(tensors["step"])

            def keep(r):
                if r.get("kind") == "step":
                    return r["step"] < resume_step
                return r.get("kind") == "epoch" and r["step"] <= resume_step
            run.start_metrics(keep)
        else:
            run.start_metrics()

        def on_epoch(t: Trainer):
            t.save(run.dir / f"checkpoint-epoch{t.epoch}.byov", {"config": run.config})
            t.save(run.dir / "checkpoint.byov", {"config": run.config})

        tr = _train(run, cfg, mode, train, run.record, on_epoch, args.resume)
        model = tr.model()
        save_model(run.dir / "model.byov", model, {"config": run.config})
        if mode == "supervised":
            probs = ev.draw_probs(model, test.images, None)
        else:
            probe = _probe(cfg, model, train)
            probs = ev.draw_probs(model, test.images, None, probe)
        row = {"mode": mode, "steps": tr.step, "epochs": tr.epoch,
               "test_top1": ev.topk_accuracy(probs, test.labels, 1),
               "test_top5": ev.topk_accuracy(probs, test.labels, 5)}
        run.record({"kind": "final", **row})
        run.csv("summary.csv", [row])
    return cmd


def _check_resume(cfg: ExperimentConfig, meta: dict, path: str) -> None:
    saved = meta.get("config")
    if saved is None:
        return
    a, b = copy.deepcopy(saved), to_dict(cfg)
    for d in (a, b):
        d.pop("output_dir", None)
    if a != b:
        diff = sorted(_diff_keys(a, b))
        raise ConfigError("--resume", f"checkpoint {path} was written under a different config "
                                      f"(differs at {', '.join(diff[:5])})")


def _diff_keys(a, b, prefix=""):
    if isinstance(a, dict) and isinstance(b, dict):
        for k in set(a) | set(b):
            yield from _diff_keys(a.get(k), b.get(k), f"{prefix}.{k}" if prefix else k)
    elif a != b:
        yield prefix


def cmd_eval_calibration(run: Run, cfg: ExperimentConfig, args) -> None:
    run.start_metrics()
    train, test = load_splits(cfg.data)
    e = cfg.evaluation
    model = _obtain(run, cfg, "byov", e.checkpoint, train, accept=("byol",))
    probe = _probe(cfg, model, train)
    if not model.is_bayesian and e.K > 1:
        msg = f"model has no Bayesian layers; with K={e.K} every draw is identical and the predictive std is degenerate"
        warnings.warn(msg)
        run.record({"kind": "warning", "message": msg})
    summary = ev.mc_predict(model, test, e.K, e.seed, probe)
    mc = ev.calibration(summary, test.labels, e.num_bins)
    mp = ev.calibration(ev.draw_probs(model, test.images, None, probe), test.labels, e.num_bins)
    rows = [_calib_row(mp, estimator="map", K=1, mean_predictive_std=0.0),
            _calib_row(mc, estimator="mc", K=e.K, mean_predictive_std=float(summary.scalar_std.mean()))]
    for r in rows:
        run.record({"kind": "calibration", **r})
    run.csv("calibration.csv", rows)
    run.csv("calibration_bins.csv", [
        {"estimator": name, "bin": i, "lower": b.lower, "upper": b.upper, "count": b.count,
         "confidence": b.confidence, "accuracy": b.accuracy}
        for name, rep in (("map", mp), ("mc", mc)) for i, b in enumerate(rep.bins)
    ])


def _ood_specs(cfg: ExperimentConfig):
    yield AugmentationSpec(Corruption.IDENTITY, 0.0)
    for kind, ladder in cfg.evaluation.ood.items():
        for level in ladder:
            yield AugmentationSpec(Corruption(kind), float(level))


def cmd_eval_ood_grid(run: Run, cfg: ExperimentConfig, args) -> None:
    run.start_metrics()
    train, test = load_splits(cfg.data)
    e = cfg.evaluation
    models = {
        "byov": _obtain(run, cfg, "byov", e.checkpoint, train),
        "byol": _obtain(run, cfg, "byol", e.baseline_checkpoint, train),
    }
    probes = {k: _probe(cfg, m, train) for k, m in models.items()}
    rows = []
    for spec in _ood_specs(cfg):
        shifted = apply_ood(test, spec, e.seed)
        for name, model in models.items():
            K = e.K if model.is_bayesian else 1
            rep = ev.calibration(ev.mc_predict(model, shifted, K, e.seed, probes[name]), shifted.labels, e.num_bins)
            row = _calib_row(rep, augmentation=spec.kind.value, strength=spec.strength, model=name, K=K)
            rows.append(row)
            run.record({"kind": "ood", **row})
    run.csv("ood_grid.csv", rows)


def cmd_eval_std_compare(run: Run, cfg: ExperimentConfig, args) -> None:
    run.start_metrics()
    train, test = load_splits(cfg.data)
    e = cfg.evaluation
    byov = _obtain(run, cfg, "byov", e.checkpoint, train)
    sup = _obtain(run, cfg, "supervised", e.reference_checkpoint, train)
    cmp = ev.compare_predictive_std(byov, sup, test, e.std_compare_K, e.seed, _probe(cfg, byov, train))
    cmp.write_csv(run.dir / "std_pairs.csv", test.labels)
    run.record({"kind": "std_compare", "K": e.std_compare_K, "pearson": cmp.pearson,
                "pearson_defined": bool(np.isfinite(cmp.pearson)), "mean": cmp.mean, "cov": cmp.cov})
    run.csv("std_moments.csv", [{
        "pearson": cmp.pearson, "mean_supervised_bbb": cmp.mean[0], "mean_byov": cmp.mean[1],
        "var_supervised_bbb": cmp.cov[0, 0], "var_byov": cmp.cov[1, 1], "cov": cmp.cov[0, 1],
    }])


def cmd_eval_mc_ablation(run: Run, cfg: ExperimentConfig, args) -> None:
    run.start_metrics()
    train, test = load_splits(cfg.data)
    e = cfg.evaluation
    model = _obtain(run, cfg, "byov", e.checkpoint, train)
    probe = _probe(cfg, model, train)
    images = test.images[: e.ablation_images]
    draws = np.stack([ev.draw_probs(model, images, derive_seed(e.seed, "ablation-pool", k), probe)
                      for k in range(e.ablation_pool)])
    res = ev.mc_ablation(draws, e.ablation_k_max, e.ablation_boot, e.seed)
    run.record({"kind": "mc_ablation", "slope": res.slope, "trailing_slope": res.trailing_slope,
                "pool": e.ablation_pool, "k_max": e.ablation_k_max})
    run.csv("mc_ablation.csv", [{"K": int(k), "std_of_mean": float(s), "mean_of_mean": float(m)}
                                for k, s, m in zip(res.K, res.std_of_mean, res.mean_of_mean)])


def cmd_eval_latent_variance(run: Run, cfg: ExperimentConfig, args) -> None:
    run.start_metrics()
    train, test = load_splits(cfg.data)
    e = cfg.evaluation
    model = _obtain(run, cfg, "byov", e.checkpoint, train)
    prof = ev.latent_variance_profile(model, test.images[: e.latent_images], e.latent_noise, e.latent_M, e.seed)
    for r in prof.summary():
        run.record({"kind": "latent_variance", **r})
    run.csv("latent_variance.csv", prof.summary())
    run.csv("latent_variance_images.csv", prof.rows())


def cmd_prune_sweep(run: Run, cfg: ExperimentConfig, args) -> None:
    run.start_metrics()
    train, test = load_splits(cfg.data)
    model = _obtain(run, cfg, "byov", cfg.evaluation.checkpoint, train)
    probe = _probe(cfg, model, train)
    audit = pr.config_hash({"checkpoint": model.data_fingerprint, "params": pr.config_hash(
        {n: float(np.sum(p.mu.data)) for n, p in model.params.items()}), "test": test.fingerprint()})
    criteria = [c for c in cfg.pruning.criteria if c != "snr" or model.is_bayesian]
    if len(criteria) < len(cfg.pruning.criteria):
        run.record({"kind": "warning", "message": "model has no Bayesian layers; SNR criterion skipped"})
    rows = pr.sparsity_sweep(model, probe, test, criteria, cfg.pruning.keep_grid, audit)
    for r in rows:
        run.record({"kind": "prune", **r})
    run.csv("pruning.csv", rows)


def _ablation_row(run: Run, cfg: ExperimentConfig, name: str, train: Dataset, test: Dataset, **keys) -> dict:
    e = cfg.evaluation
    try:
        tr = _train(run, cfg, "byov", train, run.sub_metrics(name))
    except TrainingDiverged as exc:
        log.warning("%s diverged: %s", name, exc)
        return {**keys, "status": "diverged", "message": str(exc)}
    model = tr.model()
    probe = _probe(cfg, model, train)
    rep = ev.calibration(ev.mc_predict(model, test, e.K, e.seed, probe), test.labels, e.num_bins)
    map_top1 = ev.probe_accuracy(model, probe, test)
    return {**keys, "status": "ok", "probe_top1": map_top1, **{f"mc_{k}": v for k, v in rep.row().items()}}


def cmd_ablate_priors(run: Run, cfg: ExperimentConfig, args) -> None:
    run.start_metrics()
    train, test = load_splits(cfg.data)
    rows = []
    for kind in cfg.ablation.priors:
        sub = replace(cfg, train=replace(cfg.train, prior=replace(cfg.train.prior, kind=kind)))
        row = _ablation_row(run, sub, f"prior-{kind}", train, test, prior=kind)
        rows.append(row)
        run.record({"kind": "ablation", **row})
    run.csv("priors.csv", _square(rows))


def cmd_ablate_beta(run: Run, cfg: ExperimentConfig, args) -> None:
    run.start_metrics()
    train, test = load_splits(cfg.data)
    rows = []
    for b0, b1 in cfg.ablation.beta_schedules:
        sched = ScheduleConfig(float(b0), float(b1), cfg.train.schedule.total_steps)
        sub = replace(cfg, train=replace(cfg.train, schedule=sched))
        row = _ablation_row(run, sub, f"beta-{b0:g}-{b1:g}", train, test, beta_start=b0, beta_end=b1)
        rows.append(row)
        run.record({"kind": "ablation", **row})
    run.csv("beta.csv", _square(rows))


def _square(rows: list[dict]) -> list[dict]:
    """Give every row the union of columns (diverged runs lack metric columns)."""
    cols: list[str] = []
    for r in rows:
        cols += [k for k in r if k not in cols]
    return [{c: r.get(c, "") for c in cols} for r in rows]


COMMANDS = {
    "train-byov": _cmd_train("byov"),
    "train-byol": _cmd_train("byol"),
    "train-supervised-bbb": _cmd_train("supervised"),
    "eval-calibration": cmd_eval_calibration,
    "eval-ood-grid": cmd_eval_ood_grid,
    "eval-std-compare": cmd_eval_std_compare,
    "eval-mc-ablation": cmd_eval_mc_ablation,
    "eval-latent-variance": cmd_eval_latent_variance,
    "prune-sweep": cmd_prune_sweep,
    "ablate-priors": cmd_ablate_priors,
    "ablate-beta": cmd_ablate_beta,
}
TRAIN_COMMANDS = ("train-byov", "train-byol", "train-supervised-bbb")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="byov", description="BYOV experiments")
    parser.add_argument("--verbose", "-v", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML or JSON experiment config")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="K=V",
                       help="override a config key (dotted path); repeatable")
        p.add_argument("--seed", type=int, help="shorthand for --set train.seed=N")
        p.add_argument("--force", action="store_true", help="replace an existing output directory")
        if name in TRAIN_COMMANDS:
            p.add_argument("--resume", metavar="PATH", help="continue from a training checkpoint")
    return parser


def _stderr(rec: dict) -> None:
    print(_dumps(rec), file=sys.stderr)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    args.resume = getattr(args, "resume", None)
    run = None
    try:
        cfg = load_config(args.config, args.overrides, args.seed)
        run = Run(cfg, args.command, force=args.force, resuming=bool(args.resume))
        COMMANDS[args.command](run, cfg, args)
    except ConfigError as exc:
        rec = {"kind": "error", "error": "invalid_config", "key": exc.key, "message": exc.message}
        if run is not None:
            run.fail("invalid_config", exc.message, key=exc.key)
        _stderr(rec)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        rec = run.fail("non_finite", str(exc)) if run is not None else {"error": "non_finite", "message": str(exc)}
        _stderr(rec)
        return EXIT_NAN
    except OutputExists as exc:
        _stderr({"kind": "error", "error": "output_exists", "message": str(exc)})
        return EXIT_EXISTS
    except (ValueError, OSError, ckpt.CheckpointError) as exc:
        rec = {"kind": "error", "error": type(exc).__name__, "message": str(exc)}
        if run is not None:
            run.fail(type(exc).__name__, str(exc))
        _stderr(rec)
        return EXIT_ERROR
    print(str(run.dir))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
