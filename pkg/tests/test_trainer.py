"""Trainer: schedule, Adam, loss scaling, overflow skipping, sync."""

import math

import numpy as np
import pytest

import reidmx.trainer as trainer
from reidmx.half import count_flushed, quantize_f16
from reidmx.network import EmbeddingNet, LayerSpec, build_mlp
from reidmx.sampling import PkBatch
from reidmx.synth import make_synthetic_dataset
from reidmx.tensor import Precision
from reidmx.trainer import (AdamState, MixedModel, TrainConfig, adam_update,
                            compute_gradients, lr_schedule, run_training,
                            sync_working, train_step)


def small_cfg(**over):
    base = dict(batch_size=16, ids_per_batch=4, instances_per_id=4,
                lr0=1e-3, epochs=10, decay_start=5, margin=0.3)
    base.update(over)
    return TrainConfig(**base)


def linear_model(weight: np.ndarray, mode=Precision.BINARY32) -> MixedModel:
    d = weight.shape[0]
    net = EmbeddingNet([LayerSpec("linear", "embed", d, d, bias=False)], d)
    model = MixedModel(net=net, masters={"embed.w": weight.astype(np.float32)},
                       plan={"embed": mode})
    sync_working(model)
    return model


def lattice_batch(rng, n_ids=4, k=2, dim=4) -> PkBatch:
    n = n_ids * k
    feats = rng.integers(1, 5, size=(n, dim)).astype(np.float32)
    pids = np.repeat(np.arange(n_ids), k)
    return PkBatch(features=feats, person_ids=pids,
                   camera_ids=np.zeros(n, dtype=np.int64),
                   dataset_indices=np.arange(n, dtype=np.int64),
                   ids_per_batch=n_ids, instances_per_id=k)


# -- config ------------------------------------------------------------------


def test_config_defaults_match_training_table():
    cfg = TrainConfig()
    assert cfg.batch_size == 128 and cfg.ids_per_batch == 32
    assert cfg.instances_per_id == 4
    assert cfg.lr0 == 2e-4 and cfg.epochs == 300 and cfg.decay_start == 150
    assert cfg.margin == 0.3 and cfg.input_shape == (256, 128)
    assert cfg.loss_scale == 1024.0


def test_config_validation():
    with pytest.raises(ValueError):
        small_cfg(batch_size=15)  # != P*K
    with pytest.raises(ValueError):
        small_cfg(loss_scale=3.0)  # not a power of two
    with pytest.raises(ValueError):
        small_cfg(loss_scale=-2.0)
    with pytest.raises(ValueError):
        small_cfg(lr0=0.0)
    with pytest.raises(ValueError):
        small_cfg(decay_start=11)  # beyond epochs
    with pytest.raises(ValueError):
        small_cfg(margin=-0.1)
    small_cfg(loss_scale=0.5)  # fractional powers of two are fine


# -- schedule ------------------------------------------------------------------


def test_lr_schedule_table_values():
    cfg = TrainConfig()
    assert lr_schedule(0, cfg) == 2e-4
    assert lr_schedule(149, cfg) == 2e-4
    # first decayed epoch: lr0 * f^(1/150)
    assert lr_schedule(150, cfg) == pytest.approx(2e-4 * 1e-3 ** (1 / 150))
    assert lr_schedule(299, cfg) == pytest.approx(2e-4 * 1e-3, rel=1e-12)


def test_lr_schedule_monotone_and_bounded():
    cfg = TrainConfig()
    values = [lr_schedule(e, cfg) for e in range(300)]
    assert all(a >= b for a, b in zip(values, values[1:]))
    assert min(values) >= 2e-4 * 1e-3 - 1e-18


def test_lr_schedule_range_errors():
    cfg = TrainConfig()
    with pytest.raises(ValueError):
        lr_schedule(-1, cfg)
    with pytest.raises(ValueError):
        lr_schedule(300, cfg)


# -- Adam ---------------------------------------------------------------------


def test_adam_single_step_hand_value():
    masters = {"w": np.array([0.0], dtype=np.float32)}
    opt = AdamState.init(masters)
    adam_update(opt, masters, {"w": np.array([1.0], dtype=np.float32)}, lr=0.1)
    # bias correction makes mhat = vhat = 1, so dw = -lr / (1 + eps)
    assert masters["w"][0] == pytest.approx(-0.0999999, abs=1e-6)
    assert opt.t == 1


def test_adam_zero_gradient_is_identity():
    masters = {"w": np.array([1.5, -2.0], dtype=np.float32)}
    opt = AdamState.init(masters)
    before = masters["w"].copy()
    adam_update(opt, masters, {"w": np.zeros(2, dtype=np.float32)}, lr=0.1)
    assert np.array_equal(masters["w"], before)


def test_adam_tracks_float64_reference():
    rng = np.random.default_rng(8)
    w32 = rng.standard_normal(6).astype(np.float32)
    masters = {"w": w32.copy()}
    opt = AdamState.init(masters)
    w64, m64, v64 = w32.astype(np.float64), np.zeros(6), np.zeros(6)
    for t in range(1, 21):
        g = rng.standard_normal(6).astype(np.float32)
        adam_update(opt, masters, {"w": g}, lr=0.01)
        g64 = g.astype(np.float64)
        m64 = 0.9 * m64 + 0.1 * g64
        v64 = 0.999 * v64 + 0.001 * g64 * g64
        mhat = m64 / (1 - 0.9 ** t)
        vhat = v64 / (1 - 0.999 ** t)
        w64 -= 0.01 * mhat / (np.sqrt(vhat) + 1e-8)
    assert np.allclose(masters["w"], w64, atol=1e-5)


# -- scaling equivalence and flushes ------------------------------------------


def run_fixture(loss_scale: float, steps=100):
    data = make_synthetic_dataset(ids=8, per_id=8, dim=8, noise=0.4, seed=3,
                                  train_frac=1.0, query_frac=0.0)
    cfg = small_cfg(loss_scale=loss_scale)
    net = build_mlp(8, [16], 8)
    model = MixedModel.build_binary32(net, np.random.default_rng(0))
    opt = AdamState.init(model.masters)
    history = run_training(model, opt, data, cfg, np.random.default_rng(1),
                           epochs=10, steps_per_epoch=steps // 10)
    return model, opt, history


def test_scaling_is_exact_under_binary32_plan():
    # scaling by a power of two is exact, so S=1 and S=1024 match bitwise
    m1, o1, h1 = run_fixture(1.0)
    m2, o2, h2 = run_fixture(1024.0)
    assert sum(row["skipped"] for row in h1 + h2) == 0
    for key in m1.masters:
        assert np.array_equal(m1.masters[key], m2.masters[key]), key
        assert np.array_equal(o1.m[key], o2.m[key]), key
        assert np.array_equal(o1.v[key], o2.v[key]), key
    for name in m1.bn_state:
        assert np.array_equal(m1.bn_state[name][0], m2.bn_state[name][0])
        assert np.array_equal(m1.bn_state[name][1], m2.bn_state[name][1])
    assert [r["mean_loss"] for r in h1] == [r["mean_loss"] for r in h2]


def test_same_seed_runs_are_bit_identical():
    m1, _, _ = run_fixture(1024.0, steps=20)
    m2, _, _ = run_fixture(1024.0, steps=20)
    for key in m1.masters:
        assert np.array_equal(m1.masters[key], m2.masters[key])


def test_small_gradients_flush_without_scaling():
    # identity weights at 2^-28 shrink the triplet gradients onto a
    # dyadic lattice below the binary16 subnormal range; the loss scale
    # lifts every one of them back into representable territory
    rng = np.random.default_rng(17)
    model = linear_model(np.eye(4, dtype=np.float32) * 2.0 ** -28)
    batch = lattice_batch(rng)
    cfg_raw = small_cfg(batch_size=8, ids_per_batch=4, instances_per_id=2,
                        margin=10.0, loss_scale=1.0)
    cfg_scaled = small_cfg(batch_size=8, ids_per_batch=4, instances_per_id=2,
                           margin=10.0, loss_scale=1024.0)

    _, out, raw = compute_gradients(model, batch, cfg_raw)
    assert np.all(out.hinge > 0)  # margin dominates: every anchor active
    g = raw["embed.w"]
    assert np.all(np.isfinite(g)) and np.any(g != 0)
    assert count_flushed(g) > 0

    _, _, scaled = compute_gradients(model, batch, cfg_scaled)
    gs = scaled["embed.w"]
    assert np.array_equal(gs, g * np.float32(1024.0))  # power-of-two exact
    assert count_flushed(gs) == 0


# -- step mechanics ------------------------------------------------------------


def snapshot(model, opt):
    return ({k: v.copy() for k, v in model.masters.items()},
            {k: v.copy() for k, v in model.working.items()},
            {k: (m.copy(), v.copy()) for k, (m, v) in model.bn_state.items()},
            opt.t)


def assert_unchanged(model, opt, snap):
    masters, working, bn, t = snap
    for k in masters:
        assert np.array_equal(model.masters[k], masters[k])
        assert np.array_equal(model.working[k], working[k])
    for k in bn:
        assert np.array_equal(model.bn_state[k][0], bn[k][0])
        assert np.array_equal(model.bn_state[k][1], bn[k][1])
    assert opt.t == t


def test_injected_overflow_skips_step(monkeypatch):
    rng = np.random.default_rng(2)
    net = build_mlp(4, [8], 4)
    model = MixedModel.build_binary32(net, rng)
    opt = AdamState.init(model.masters)
    batch = lattice_batch(rng, n_ids=4, k=2, dim=4)
    cfg = small_cfg(batch_size=8, ids_per_batch=4, instances_per_id=2)
    snap = snapshot(model, opt)

    real = trainer.compute_gradients

    def poisoned(model_, batch_, cfg_):
        loss, out, grads = real(model_, batch_, cfg_)
        key = next(iter(grads))
        grads[key] = grads[key].copy()
        grads[key].flat[0] = np.inf
        return loss, out, grads

    monkeypatch.setattr(trainer, "compute_gradients", poisoned)
    loss, taken, _ = train_step(model, batch, cfg, opt, lr=1e-3)
    assert not taken
    assert math.isfinite(loss)
    assert_unchanged(model, opt, snap)


def test_organic_overflow_skips_and_normal_scale_steps():
    rng = np.random.default_rng(4)
    net = build_mlp(4, [8], 4)
    batch = lattice_batch(rng, n_ids=4, k=2, dim=4)
    bomb = small_cfg(batch_size=8, ids_per_batch=4, instances_per_id=2,
                     loss_scale=2.0 ** 127, margin=10.0)
    sane = small_cfg(batch_size=8, ids_per_batch=4, instances_per_id=2,
                     loss_scale=1024.0, margin=10.0)

    model = MixedModel.build_binary32(net, np.random.default_rng(7))
    opt = AdamState.init(model.masters)
    # probe that the bomb really overflows, then snapshot (the probe's
    # forward already advanced the running statistics)
    _, _, scaled = compute_gradients(model, batch, bomb)
    assert any(not np.all(np.isfinite(g)) for g in scaled.values())
    snap = snapshot(model, opt)

    _, taken, _ = train_step(model, batch, bomb, opt, lr=1e-3)
    assert not taken
    assert_unchanged(model, opt, snap)

    _, taken, _ = train_step(model, batch, sane, opt, lr=1e-3)
    assert taken
    assert opt.t == 1
    assert any(not np.array_equal(model.masters[k], snap[0][k])
               for k in model.masters)


def test_nonfinite_masters_raise():
    model = linear_model(np.eye(3, dtype=np.float32))
    model.masters["embed.w"][0, 0] = np.nan
    batch = lattice_batch(np.random.default_rng(0), n_ids=3, k=2, dim=3)
    cfg = small_cfg(batch_size=6, ids_per_batch=3, instances_per_id=2)
    opt = AdamState.init(model.masters)
    with pytest.raises(FloatingPointError):
        train_step(model, batch, cfg, opt, lr=1e-3)


def test_working_sync_invariant():
    rng = np.random.default_rng(5)
    net = build_mlp(6, [8], 4)
    model = MixedModel.build_partitioned(net, rng)
    data = make_synthetic_dataset(ids=6, per_id=6, dim=6, noise=0.4, seed=1,
                                  train_frac=1.0, query_frac=0.0)
    cfg = small_cfg(batch_size=12, ids_per_batch=6, instances_per_id=2)
    opt = AdamState.init(model.masters)
    run_training(model, opt, data, cfg, rng, epochs=3, steps_per_epoch=4)
    for key, master in model.masters.items():
        if model.param_precision(key) is Precision.BINARY16:
            assert np.array_equal(model.working[key], quantize_f16(master)), key
        else:
            assert np.array_equal(model.working[key], master), key
            assert model.working[key] is not master  # independent buffer


def test_partitioned_plan_shape():
    net = build_mlp(6, [8], 4)
    model = MixedModel.build_partitioned(net, np.random.default_rng(0))
    assert model.plan["fc1"] is Precision.BINARY16
    assert model.plan["embed"] is Precision.BINARY16
    assert model.plan["bn1"] is Precision.BINARY32
    assert model.param_precision("fc1.w") is Precision.BINARY16
    assert model.param_precision("bn1.gamma") is Precision.BINARY32


def test_zero_epochs_leaves_model_at_init():
    data = make_synthetic_dataset(ids=6, per_id=6, dim=6, noise=0.4, seed=2,
                                  train_frac=1.0, query_frac=0.0)
    net = build_mlp(6, [8], 4)
    model = MixedModel.build_binary32(net, np.random.default_rng(3))
    init = {k: v.copy() for k, v in model.masters.items()}
    opt = AdamState.init(model.masters)
    history = run_training(model, opt, data, small_cfg(batch_size=12,
                           ids_per_batch=6, instances_per_id=2),
                           np.random.default_rng(0), epochs=0)
    assert history == []
    for k in init:
        assert np.array_equal(model.masters[k], init[k])


def test_history_rows():
    data = make_synthetic_dataset(ids=6, per_id=6, dim=6, noise=0.4, seed=2,
                                  train_frac=1.0, query_frac=0.0)
    net = build_mlp(6, [8], 4)
    model = MixedModel.build_binary32(net, np.random.default_rng(3))
    opt = AdamState.init(model.masters)
    cfg = small_cfg(batch_size=12, ids_per_batch=6, instances_per_id=2,
                    epochs=4, decay_start=2)
    history = run_training(model, opt, data, cfg, np.random.default_rng(0),
                           steps_per_epoch=3)
    assert [r["epoch"] for r in history] == [0, 1, 2, 3]
    for row in history:
        assert row["steps"] == 3 and row["skipped"] == 0
        assert math.isfinite(row["mean_loss"])
        assert row["lr"] == lr_schedule(row["epoch"], cfg)
