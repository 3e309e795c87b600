import json
from dataclasses import replace

import hypothesis.strategies as st
import numpy as np
import pytest
from hypothesis import given

from byov import autodiff as ad
from byov.config import DataConfig, load_splits
from byov.data import AugmentConfig, synthetic_dataset
from byov.model import BayesianScope, NetworkSpec
from byov.optim import Adam, SGD
from byov.training import (
    BetaSchedule,
    PriorConfig,
    ScheduleConfig,
    TrainConfig,
    Trainer,
    TrainingDiverged,
    beta_at,
    load_model,
)

SPEC = NetworkSpec(input_shape=(1, 12, 12), encoder_hidden=[24, 12], projector=[24, 8], predictor=[24, 8])
DATA = synthetic_dataset(128, 4, seed=0)


def cfg(**kw):
    base = TrainConfig(batch_size=32, epochs=2, seed=0)
    return replace(base, **kw)


def test_beta_endpoints_and_midpoint():
    s = BetaSchedule(0.0, 1.0, 100)
    assert beta_at(s, 0) == 0.0 and beta_at(s, 100) == 1.0
    assert abs(beta_at(s, 50) - 0.5) < 1e-12
    assert beta_at(s, -5) == 0.0 and beta_at(s, 500) == 1.0
    with pytest.raises(ValueError):
        BetaSchedule(-1.0, 1.0, 10)
    with pytest.raises(ValueError):
        BetaSchedule(0.0, 1.0, 0)


@given(st.floats(0, 5), st.floats(0, 5), st.integers(1, 1000))
def test_beta_monotone_when_increasing(b0, b1, T):
    lo, hi = min(b0, b1), max(b0, b1)
    s = BetaSchedule(lo, hi, T)
    vals = [beta_at(s, t) for t in range(0, T + 1, max(1, T // 50))]
    assert all(b <= a + 1e-15 for b, a in zip(vals, vals[1:]))
    assert beta_at(s, 0) == lo and beta_at(s, T) == hi


def test_weight_decay_rejected_for_bayesian_layers():
    with pytest.raises(ValueError, match="weight_decay"):
        Trainer(SPEC, cfg(weight_decay=1e-4), DATA)
    Trainer(SPEC, cfg(weight_decay=1e-4), DATA, "byol")


def test_objective_bookkeeping_exact():
    tr = Trainer(SPEC, cfg(), DATA)
    for _ in range(6):
        r = tr.train_step()
        assert r.loss == r.distill + r.beta * r.kl
        assert r.kl == r.kl_raw * tr.kl_scale


def test_single_step_bit_reproducible():
    a = Trainer(SPEC, cfg(), DATA).train_step().to_json()
    b = Trainer(SPEC, cfg(), DATA).train_step().to_json()
    assert a == b


def test_zero_variance_byov_matches_byol():
    c = cfg(init_log_var=-50.0, schedule=ScheduleConfig(0.0, 0.0))
    v, d = Trainer(SPEC, c, DATA, "byov"), Trainer(SPEC, c, DATA, "byol")
    for _ in range(10):
        assert abs(v.train_step().distill - d.train_step().distill) < 1e-6


def test_zero_variance_supervised_matches_deterministic():
    c = cfg(init_log_var=-50.0, schedule=ScheduleConfig(0.0, 0.0))
    v = Trainer(SPEC, c, DATA, "supervised")
    d = Trainer(replace(SPEC, bayesian_scope=BayesianScope.NONE), c, DATA, "supervised")
    for _ in range(10):
        assert abs(v.train_step().distill - d.train_step().distill) < 1e-6


def test_supervised_overfits_small_set():
    small = DATA.subset(np.arange(64))
    tr = Trainer(SPEC, cfg(batch_size=64, epochs=400, lr=3e-3), small, "supervised")
    acc = 0.0
    for _ in range(2000):
        acc = tr.train_step().accuracy
        if acc > 0.95:
            break
    assert acc > 0.95


def test_supervised_rejects_teacher_priors():
    with pytest.raises(ValueError, match="standard_normal"):
        Trainer(SPEC, cfg(prior=PriorConfig("teacher_mean")), DATA, "supervised")


def test_kl_dominated_training_decreases_kl():
    c = cfg(epochs=50, schedule=ScheduleConfig(1e6, 1e6))
    tr = Trainer(SPEC, c, DATA)
    kls = [tr.train_step().kl_raw for _ in range(200)]
    assert np.mean(kls[-50:]) < np.mean(kls[-100:-50]) < np.mean(kls[:50])


@pytest.mark.parametrize("kind", ["standard_normal", "teacher_mean", "teacher_mean_var"])
def test_every_prior_trains_without_nan(kind):
    tr = Trainer(SPEC, cfg(prior=PriorConfig(kind)), DATA)
    recs = tr.fit()
    assert all(np.isfinite(r.loss) for r in recs)


def test_epoch_records_carry_layer_stats():
    recs = Trainer(SPEC, cfg(), DATA).fit()
    epochs = [r for r in recs if r.kind == "epoch"]
    assert len(epochs) == 2
    assert "encoder.0.weight" in epochs[0].layers
    assert {"teacher_proj_min_std", "teacher_student_cos"} <= set(epochs[0].extra)
    json.loads(epochs[0].to_json())


def test_checkpoint_round_trip_then_identical_step(tmp_path):
    a = Trainer(SPEC, cfg(), DATA)
    for _ in range(3):
        a.train_step()
    a.save(tmp_path / "ck.byov")
    b = Trainer(SPEC, cfg(), DATA)
    b.resume(tmp_path / "ck.byov")
    assert a.train_step().to_json() == b.train_step().to_json()


def test_resumed_run_equals_uninterrupted(tmp_path):
    full = [r.to_json() for r in Trainer(SPEC, cfg(), DATA).fit()]
    first = Trainer(SPEC, cfg(), DATA)
    head = [r.to_json() for r in first.fit(epochs=1)]
    first.save(tmp_path / "e1.byov")
    second = Trainer(SPEC, cfg(), DATA)
    second.resume(tmp_path / "e1.byov")
    tail = [r.to_json() for r in second.fit()]
    assert head + tail == full


def test_saved_model_loads(tmp_path):
    from byov.training import save_model
    tr = Trainer(SPEC, cfg(epochs=1), DATA)
    tr.fit()
    save_model(tmp_path / "m.byov", tr.model())
    m = load_model(tmp_path / "m.byov")
    assert m.mode == "byov" and m.spec == SPEC
    for n, p in tr.params.items():
        assert np.array_equal(m.params[n].mu.data, p.mu.data)
        assert np.array_equal(m.teacher.weights.get(n, 0), tr.teacher.weights.get(n, 0))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_values_abort_with_diagnostic():
    tr = Trainer(SPEC, cfg(init_log_var=800.0), DATA)
    with pytest.raises(TrainingDiverged, match=r"step 0: non-finite values produced by 'matmul'"):
        tr.train_step()


def test_optimizers_leave_params_alone_without_gradient():
    for opt_cls in (Adam, SGD):
        t = ad.Tensor(np.ones(3), requires_grad=True)
        opt = opt_cls({"t": t})
        t.grad = np.zeros(3)
        opt.step()
        assert np.array_equal(t.data, np.ones(3))


def test_byol_learns_on_real_data():
    train, _ = load_splits(DataConfig(train_limit=1024))
    tr = Trainer(NetworkSpec(), TrainConfig(epochs=2), train, "byol")
    recs = tr.fit()
    steps = [r.distill for r in recs if r.kind == "step"]
    assert np.mean(steps[-4:]) < steps[0]
    assert [r for r in recs if r.kind == "epoch"][-1].extra["teacher_student_cos"] > 0.5
