import json
import math

import numpy as np
import pytest

from emkit.emformer.model import ModelConfig
from emkit.errors import ConfigError, ContractError, ShapeError, TrainingDiverged
from emkit.harness import data as hdata
from emkit.harness import report, train
from emkit.harness.data import NormStats, SyntheticSystem, generate_dataset, load_dataset, save_dataset
from emkit.harness.optim import AdamW, cosine_lr
from emkit.harness.rollout import persistence, rollout
from emkit.harness.train import (Forecaster, TrainConfig, finetune, load_forecaster, pretrain,
                                 save_forecaster, unroll_loss)
from emkit.kvmemory import CachePolicy
from emkit.loss import latitude_weights
from emkit.tensor.core import Tensor
from emkit.tensor.tape import grad_check

SMALL = dict(height=8, width=16, dim=4, heads=1, depth=1, blocks=2, windows=((4, 4),), kernel_scale=0.1)


@pytest.fixture(scope="module")
def ds():
    return generate_dataset(SyntheticSystem(), 24)


@pytest.fixture(scope="module")
def small_ds():
    return generate_dataset(SyntheticSystem(n_lat=8, n_lon=16), 12)


def _model(ds, **kw):
    cfg = ModelConfig.tiny(**kw) if not kw.get("height") else ModelConfig(**kw)
    return Forecaster.create(cfg, NormStats.fit(ds), seed=0)


# synthetic system

def test_frozen_dynamics_is_stationary():
    sys_ = SyntheticSystem(velocity=(0, 0, 0, 0), diffusion=0.0)
    ds = generate_dataset(sys_, 5)
    for t in range(1, 5):
        np.testing.assert_array_equal(ds.fields[t], ds.fields[0])


def test_integer_velocity_is_a_pure_shift():
    sys_ = SyntheticSystem(velocity=(1, 2, -1, 3), diffusion=0.0)
    ds = generate_dataset(sys_, 3)
    for v, c in enumerate((1, 2, -1, 3)):
        np.testing.assert_array_equal(ds.fields[1, v], np.roll(ds.fields[0, v], c, axis=1))
        np.testing.assert_array_equal(ds.fields[2, v], np.roll(ds.fields[0, v], 2 * c, axis=1))


def test_fractional_shift_interpolates():
    sys_ = SyntheticSystem(velocity=0.25, diffusion=0.0)
    x = sys_.initial_state()
    y = sys_.step(x)
    np.testing.assert_allclose(y, 0.75 * x + 0.25 * np.roll(x, 1, axis=2), atol=1e-12)


def test_diffusion_conserves_the_mean():
    sys_ = SyntheticSystem(velocity=0.0, diffusion=0.2)
    x = sys_.initial_state()
    y = sys_.step(x)
    np.testing.assert_allclose(y.mean(axis=(1, 2)), x.mean(axis=(1, 2)), atol=1e-12)
    assert np.all(y.std(axis=(1, 2)) < x.std(axis=(1, 2)))


def test_generation_is_deterministic():
    a = generate_dataset(SyntheticSystem(seed=3), 10).fields
    b = generate_dataset(SyntheticSystem(seed=3), 10).fields
    c = generate_dataset(SyntheticSystem(seed=4), 10).fields
    assert a.tobytes() == b.tobytes()
    assert not np.array_equal(a, c)


@pytest.mark.parametrize("kw", [dict(diffusion=0.3), dict(forcing=-0.1), dict(velocity=(1, 2)),
                                dict(n_lat=1)])
def test_system_validation(kw):
    with pytest.raises(ConfigError):
        SyntheticSystem(**kw)


def test_dataset_contracts(ds):
    with pytest.raises(ContractError):
        generate_dataset(SyntheticSystem(), 1)
    with pytest.raises(ContractError):
        ds.split(len(ds) - 1)
    with pytest.raises(ShapeError):
        hdata.Dataset(np.zeros((3, 4, 5)), (), np.zeros(4), np.zeros(5))
    bad = ds.fields.copy()
    bad[0, 0, 0, 0] = np.nan
    with pytest.raises(ContractError):
        hdata.Dataset(bad, ds.names, ds.lats, ds.lons)


def test_dataset_roundtrip(ds, tmp_path):
    save_dataset(ds, tmp_path / "d")
    back = load_dataset(tmp_path / "d")
    assert back.fields.tobytes() == ds.fields.tobytes()
    assert back.names == ds.names
    np.testing.assert_array_equal(back.lats, ds.lats)


def test_norm_stats_roundtrip(ds):
    st = NormStats.fit(ds)
    z = np.stack([st.normalize(f) for f in ds.fields])
    np.testing.assert_allclose(z.mean(axis=(0, 2, 3)), 0, atol=1e-12)
    np.testing.assert_allclose(z.std(axis=(0, 2, 3)), 1, atol=1e-12)
    np.testing.assert_allclose(st.denormalize(st.normalize(ds.fields[3])), ds.fields[3], atol=1e-9)
    assert NormStats.from_dict(json.loads(json.dumps(st.to_dict()))).to_dict() == st.to_dict()


# optimiser

def test_cosine_schedule_endpoints():
    assert cosine_lr(0, 100, 1e-3) == pytest.approx(1e-3)
    assert cosine_lr(100, 100, 1e-3, 1e-7) == pytest.approx(1e-7)
    assert cosine_lr(50, 100, 1e-3, 0.0) == pytest.approx(5e-4)


def test_adamw_first_step_is_lr_times_sign():
    p = {"a": Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)}
    g = {"a": np.array([0.5, -4.0, 0.0])}
    out = AdamW(0.1).step(p, g)
    np.testing.assert_allclose(out["a"].data, [0.9, -1.9, 3.0], atol=1e-6)
    assert out["a"].requires_grad


# training

def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(strategy="bogus")
    with pytest.raises(ConfigError):
        TrainConfig(loss="bogus")
    with pytest.raises(ConfigError):
        TrainConfig(strategy="accumulative")
    assert TrainConfig(strategy="accumulative", policy={"lam": 0.5, "N": 3}).policy == CachePolicy(0.5, 3)


def test_zero_epoch_pretrain_is_a_noop(ds):
    m = _model(ds)
    res = pretrain(m, ds, TrainConfig(epochs=0))
    assert res.curve == []
    for k, t in m.params.items():
        assert res.model.params[k].data.tobytes() == t.data.tobytes()
    assert res.model.theta == m.theta


def test_strategy_none_returns_the_same_model(ds):
    m = _model(ds)
    assert finetune(m, ds, TrainConfig(strategy="none")).model is m


def test_finetune_needs_k_at_least_two(ds):
    with pytest.raises(ContractError):
        finetune(_model(ds), ds, TrainConfig(strategy="plain", K=1))


def test_pretrain_lowers_the_loss_and_moves_theta(ds):
    m = _model(ds)
    res = pretrain(m, ds, TrainConfig(epochs=2, batch_size=4, lr=1e-3), heldout=ds)
    assert len(res.curve) == 2
    assert res.curve[1]["loss"] < res.curve[0]["loss"]
    assert res.model.theta > m.theta
    for row in res.curve:
        assert row["alpha"] + row["beta"] == pytest.approx(1.0)
        assert -math.pi / 2 <= row["theta"] <= math.pi / 2
        assert math.isfinite(row["heldout_rmse"])


def test_training_routes_through_the_blended_loss(ds, monkeypatch):
    calls = []
    real = train.loss_total

    def spy(*a, **kw):
        calls.append(a[3].data[0])
        return real(*a, **kw)

    monkeypatch.setattr(train, "loss_total", spy)
    pretrain(_model(ds), ds, TrainConfig(epochs=1, batch_size=8))
    assert len(calls) == math.ceil((len(ds) - 1) / 8)
    assert calls[0] == pytest.approx(-math.pi / 2 + 1e-3)


def test_l2_objective_keeps_theta_and_w(ds):
    m = _model(ds)
    res = pretrain(m, ds, TrainConfig(epochs=1, batch_size=8, loss="l2"))
    assert res.model.theta == m.theta
    np.testing.assert_array_equal(res.model.w, m.w)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_raises_with_diagnostics(ds):
    m = _model(ds)
    m.params["head.b"] = Tensor(np.full(m.params["head.b"].shape, 1e200), requires_grad=True)
    with pytest.raises(TrainingDiverged) as ei:
        pretrain(m, ds, TrainConfig(epochs=1))
    assert ei.value.diagnostics["where"] == "pretrain"
    assert "theta" in ei.value.diagnostics


def test_accumulative_cache_stays_within_capacity(ds):
    m = _model(ds)
    pol = CachePolicy(lam=0.9, N=2)
    res = finetune(m, ds, TrainConfig(strategy="accumulative", K=6, updates=1, batch_size=1, policy=pol,
                                      lr=1e-6))
    grid = m.config.plan()[0][-1]
    L = grid[0] * grid[1]
    sizes = res.cache_sizes[0]
    assert len(sizes) == 6
    assert sizes[0] == L
    assert max(sizes) == pol.N * L


def test_finetune_is_deterministic(ds):
    m = _model(ds)
    cfg = TrainConfig(strategy="plain", K=2, updates=2, batch_size=1, lr=1e-5)
    a, b = finetune(m, ds, cfg), finetune(m, ds, cfg)
    assert [r["loss"] for r in a.curve] == [r["loss"] for r in b.curve]
    for k in m.params:
        assert a.model.params[k].data.tobytes() == b.model.params[k].data.tobytes()


@pytest.mark.parametrize("strategy", ["plain", "accumulative"])
def test_unrolled_loss_gradient_matches_finite_differences(small_ds, strategy):
    m = _model(small_ds, **SMALL)
    z = np.stack([m.stats.normalize(f) for f in small_ds.fields])
    pol = CachePolicy(lam=0.9, N=2) if strategy == "accumulative" else None
    cfg = TrainConfig(strategy=strategy, K=3, policy=pol)
    weights = latitude_weights(small_ds.lats)

    def f(t):
        m.params = {**m.params, "head.b": t}
        return unroll_loss(m, z, [0, 2], cfg, weights)

    assert grad_check(f, m.params["head.b"], eps=1e-5) < 1e-5


def test_forecaster_checkpoint_roundtrip(ds, tmp_path):
    m = _model(ds)
    m.theta, m.w = 0.3, np.array([0.1, -0.2, 0.3, 0.0])
    save_forecaster(tmp_path / "ck", m)
    back = load_forecaster(tmp_path / "ck")
    assert back.theta == 0.3
    np.testing.assert_array_equal(back.w, m.w)
    np.testing.assert_array_equal(back.predict(ds.fields[0]), m.predict(ds.fields[0]))


# rollout

def test_single_step_rollout_equals_predict(ds):
    m = _model(ds)
    res = rollout(m, ds.fields[4], 1, truth=ds.fields[5:6], lats=ds.lats)
    np.testing.assert_allclose(res.preds[0, 0], m.predict(ds.fields[4]), atol=1e-12)
    assert len(res.rmse) == 1 and len(res.acc) == 1


def test_zero_head_model_is_persistence(ds):
    m = _model(ds)
    m.params["head.w"] = Tensor(np.zeros(m.params["head.w"].shape), requires_grad=True)
    init, truth = ds.fields[2], ds.fields[3:8]
    res = rollout(m, init, 5, truth=truth, lats=ds.lats)
    for k in range(5):
        np.testing.assert_allclose(res.preds[k, 0], init, atol=1e-9)
    np.testing.assert_allclose(res.rmse, persistence(init, truth, m.stats, ds.lats), atol=1e-9)


def test_rollout_cache_sizes_track_capacity(ds):
    m = _model(ds)
    pol = CachePolicy(N=3)
    res = rollout(m, ds.fields[:2], 6, with_cache=True, policy=pol)
    L = res.cache_sizes[0]
    assert res.cache_sizes == [L, 2 * L, 3 * L, 3 * L, 3 * L, 3 * L]
    assert res.preds.shape == (6, 2) + ds.fields.shape[1:]


def test_rollout_contracts(ds):
    m = _model(ds)
    with pytest.raises(ContractError):
        rollout(m, ds.fields[0], 0)
    with pytest.raises(ShapeError):
        rollout(m, ds.fields[0], 3, truth=ds.fields[1:3])


def test_persistence_error_grows_with_lead_under_diffusion():
    sys_ = SyntheticSystem(velocity=0.0, diffusion=0.1)
    d = generate_dataset(sys_, 12)
    st = NormStats.fit(d)
    # uniform weights make the error a plain L2 norm, under which heat-flow drift is monotone
    curve = persistence(d.fields[0], d.fields[1:], st, np.zeros(d.fields.shape[2]))
    assert all(b >= a for a, b in zip(curve, curve[1:]))
    assert curve[0] > 0


# report

RUNS = {"plain": {"rmse": [0.1, 0.2], "acc": [0.9, None]},
        "accumulative": {"rmse": [0.1, 0.15, 0.3], "acc": [0.95, 0.9, float("nan")]}}


def test_report_rows_and_missing_cells():
    rows = report.rows_from_runs(RUNS)
    assert [r["strategy"] for r in rows] == ["accumulative"] * 3 + ["plain"] * 2
    text = report.to_csv(rows)
    lines = text.splitlines()
    assert lines[0] == "strategy,lead,rmse,acc"
    assert lines[3] == "accumulative,3,0.300000,-"
    assert lines[5] == "plain,2,0.200000,-"
    md = report.to_markdown(rows)
    assert md.splitlines()[1] == "|---|---|---|---|"


def test_report_is_byte_identical(tmp_path):
    a = report.write_report(RUNS, tmp_path / "a")
    b = report.write_report(dict(reversed(list(RUNS.items()))), tmp_path / "b")
    for pa, pb in zip(a, b):
        assert pa.read_bytes() == pb.read_bytes()


def test_report_needs_runs(tmp_path):
    with pytest.raises(ValueError):
        report.write_report({}, tmp_path)
