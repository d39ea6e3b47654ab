import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hyperadapt import data
from hyperadapt.adapters import AdapterConfig
from hyperadapt.backbone import BackboneSpec
from hyperadapt.hashing import hex_digest
from hyperadapt.training import (AdamState, Batch, EmbedderConfig, NonFiniteGradient, TrainConfig, TrainingDiverged,
                                 adam_step, attach_concat_fusion, attach_hyperadapt, evaluate, finetune_head_model,
                                 fit_group_models, predict_logits, prepare_task, pretrain_model, run_method, train)


def theta_hash(model):
    theta = model.state.theta
    return hex_digest(b"".join(k.encode() + np.ascontiguousarray(theta[k]).tobytes() for k in sorted(theta)))


@pytest.fixture(scope="module")
def spec(small_task):
    return BackboneSpec(input_shape=small_task.train.inputs.shape[1:], channels=(4, 8))


@pytest.fixture(scope="module")
def vanilla(spec, small_task):
    model, _ = train(pretrain_model(spec, 0), small_task.train, small_task.val, TrainConfig(epochs=3, lr=3e-3))
    return model


# --- Adam -------------------------------------------------------------------

def test_adam_zero_gradient_leaves_params_and_decays_moments():
    p = {"w": np.array([1.0, -2.0])}
    state = AdamState({"w": np.array([0.5, 0.5])}, {"w": np.array([0.0, 0.0])}, 1)
    new, moments = adam_step(p, {"w": np.zeros(2)}, state, 2, 0.1)
    assert np.array_equal(moments.m["w"], 0.9 * np.array([0.5, 0.5]))
    # m is nonzero so the step still moves; with zero moments the params stay put
    new, moments = adam_step(p, {"w": np.zeros(2)}, AdamState(), 1, 0.1)
    assert np.array_equal(new["w"], p["w"]) and not moments.m["w"].any()


def test_adam_first_step_matches_hand_computation():
    g = np.array([3.0, -0.5, 1e-3])
    p = {"w": np.array([0.2, 0.4, -0.1])}
    lr = 1e-3
    new, moments = adam_step(p, {"w": g}, AdamState(), 1, lr)
    # m_hat = g and v_hat = g^2 after bias correction
    expected = p["w"] - lr * g / (np.abs(g) + 1e-8)
    assert np.allclose(new["w"], expected, rtol=0, atol=1e-15)
    assert np.allclose(new["w"] - p["w"], -lr * np.sign(g), rtol=1e-4, atol=0)
    assert np.allclose(moments.m["w"], 0.1 * g) and np.allclose(moments.v["w"], 0.001 * g * g)


def test_adam_frozen_tensor_is_bit_identical():
    p = {"a": np.array([1.0, 2.0]), "b": np.array([3.0])}
    new, moments = adam_step(p, {"a": np.ones(2), "b": np.ones(1)}, AdamState(), 1, 0.5, frozen={"b"})
    assert new["b"] is p["b"] and "b" not in moments.m
    assert not np.array_equal(new["a"], p["a"])


def test_adam_missing_gradient_counts_as_zero():
    p = {"a": np.array([1.0])}
    new, _ = adam_step(p, {}, AdamState(), 1, 0.5)
    assert np.array_equal(new["a"], p["a"])


def test_adam_rejects_bad_input():
    p = {"a": np.array([1.0])}
    with pytest.raises(NonFiniteGradient, match="'a'"):
        adam_step(p, {"a": np.array([np.nan])}, AdamState(), 1, 0.1)
    with pytest.raises(ValueError):
        adam_step(p, {"a": np.array([1.0])}, AdamState(), 0, 0.1)
    # a non-finite gradient on a frozen tensor is never applied, so it is not an error
    adam_step(p, {"a": np.array([np.inf])}, AdamState(), 1, 0.1, frozen={"a"})


@given(st.lists(st.floats(-1e3, 1e3).filter(lambda x: abs(x) > 1e-3), min_size=1, max_size=6),
       st.floats(1e-5, 1e-1))
def test_adam_first_step_size_is_lr(gs, lr):
    g = np.array(gs)
    new, _ = adam_step({"w": np.zeros_like(g)}, {"w": g}, AdamState(), 1, lr)
    assert np.allclose(np.abs(new["w"]), lr, rtol=1e-4)
    assert np.array_equal(np.sign(new["w"]), -np.sign(g))


# --- config and schedule ---------------------------------------------------------

def test_lr_trace_matches_schedule(spec, small_task):
    cfg = TrainConfig(epochs=7, lr=0.01, decay=10.0, decay_period=3)
    _, hist = train(pretrain_model(spec, 0), small_task.train, small_task.val, cfg)
    assert hist.lr == [0.01 / 10.0 ** (e // 3) for e in range(7)]
    assert len(hist.train_loss) == len(hist.val_loss) == len(hist.val_f1) == 7
    assert 0 <= hist.best_epoch < 7
    assert hist.val_f1[hist.best_epoch] == max(hist.val_f1)
    assert hist.val_f1.index(max(hist.val_f1)) == hist.best_epoch


@given(st.integers(1, 60), st.floats(1e-6, 1.0), st.floats(1.5, 100.0), st.one_of(st.none(), st.integers(1, 20)))
def test_lr_schedule_formula(epochs, lr, decay, period):
    cfg = TrainConfig(epochs=epochs, lr=lr, decay=decay, decay_period=period)
    p = period if period is not None else max(epochs // 2, 1)
    assert [cfg.lr_at(e) for e in range(epochs)] == [lr / decay ** (e // p) for e in range(epochs)]


def test_default_schedule_decays_once_at_midpoint():
    cfg = TrainConfig()
    assert (cfg.epochs, cfg.batch_size, cfg.lr, cfg.decay) == (30, 64, 1e-3, 10.0)
    assert cfg.lr_at(14) == 1e-3 and cfg.lr_at(15) == 1e-3 / 10 and cfg.lr_at(29) == 1e-3 / 10


@pytest.mark.parametrize("bad", [dict(epochs=0), dict(lr=-1e-3), dict(decay=1.0), dict(stage="x"),
                                 dict(baseline="x"), dict(batch_size=0), dict(decay_period=0)])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad)


# --- train --------------------------------------------------------------------

def test_zero_lr_keeps_params_bit_identical(spec, small_task):
    model = pretrain_model(spec, 0)
    out, _ = train(model, small_task.train, small_task.val, TrainConfig(epochs=2, lr=0.0))
    for k, v in model.state.params.items():
        assert np.array_equal(out.state.params[k], v)


def test_adapt_stage_never_changes_theta(vanilla, small_task):
    model = attach_hyperadapt(vanilla, small_task.schema, AdapterConfig(), EmbedderConfig(), 0)
    before = theta_hash(model)
    out, _ = train(model, small_task.train, small_task.val, TrainConfig(epochs=5, lr=1e-2, stage="adapt"))
    assert theta_hash(out) == before == theta_hash(vanilla)
    assert any(not np.array_equal(out.state.phi[k], model.state.phi[k]) for k in model.state.phi)


def test_pretrain_stage_updates_theta_only(spec, small_task):
    model = pretrain_model(spec, 0)
    assert model.trainable("pretrain") == list(model.state.theta)
    out, _ = train(model, small_task.train, small_task.val, TrainConfig(epochs=2, lr=1e-2))
    assert theta_hash(out) != theta_hash(model)


def test_finetune_head_updates_head_only(vanilla, small_task):
    model = finetune_head_model(vanilla)
    out, _ = train(model, small_task.train, small_task.val, TrainConfig(epochs=3, lr=1e-2, stage="adapt"))
    for k, v in vanilla.state.theta.items():
        same = np.array_equal(out.state.theta[k], v)
        assert same != k.startswith("bb/head/"), k


def test_training_is_deterministic(spec, small_task):
    cfg = TrainConfig(epochs=3, lr=3e-3, seed=5)
    a, ha = train(pretrain_model(spec, 1), small_task.train, small_task.val, cfg)
    b, hb = train(pretrain_model(spec, 1), small_task.train, small_task.val, cfg)
    assert ha.to_dict() == hb.to_dict()
    assert all(np.array_equal(a.state.params[k], b.state.params[k]) for k in a.state.params)
    assert evaluate(a, small_task.test, 3).to_dict() == evaluate(b, small_task.test, 3).to_dict()


def test_shuffle_seed_changes_training(spec, small_task):
    a, _ = train(pretrain_model(spec, 1), small_task.train, small_task.val, TrainConfig(epochs=1, seed=0))
    b, _ = train(pretrain_model(spec, 1), small_task.train, small_task.val, TrainConfig(epochs=1, seed=1))
    assert theta_hash(a) != theta_hash(b)


def test_divergence_reports_epoch(spec, small_task):
    with pytest.raises(TrainingDiverged) as info:
        train(pretrain_model(spec, 0), small_task.train, small_task.val, TrainConfig(epochs=3, lr=1e200))
    assert info.value.epoch == 0 and "epoch 0" in str(info.value)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_pretraining_reduces_loss_on_default_task(seed):
    ds = data.generate(data.SyntheticConfig(), seed)
    task = prepare_task(ds, data.split(ds, seed))
    spec = BackboneSpec(input_shape=task.train.inputs.shape[1:])
    _, hist = train(pretrain_model(spec, seed), task.train, task.val, TrainConfig(epochs=30, seed=seed))
    assert hist.train_loss[-1] < hist.train_loss[0]


# --- initialization and baselines -------------------------------------------------

def test_adapter_starts_as_identity(vanilla, small_task):
    for depth in ("head_only", "all_but_stem", "all"):
        model = attach_hyperadapt(vanilla, small_task.schema, AdapterConfig(depth=depth), EmbedderConfig(), 3)
        assert np.array_equal(predict_logits(model, small_task.val), predict_logits(vanilla, small_task.val))
        assert evaluate(model, small_task.val, 3).to_dict() == evaluate(vanilla, small_task.val, 3).to_dict()


def test_concat_fusion_with_zero_weights_matches_vanilla(vanilla, small_task):
    model = attach_concat_fusion(vanilla, small_task.schema, EmbedderConfig(), 0)
    assert not model.state.phi["cf/w"].any()
    assert np.array_equal(predict_logits(model, small_task.test), predict_logits(vanilla, small_task.test))


def test_single_group_models_equal_vanilla(spec, small_task):
    def one_group(b):
        return Batch(b.inputs, b.labels, np.zeros_like(b.groups), b.enc)

    train_b, val_b, test_b = one_group(small_task.train), one_group(small_task.val), one_group(small_task.test)
    cfg = TrainConfig(epochs=2, lr=3e-3)
    pooled, _ = train(pretrain_model(spec, 4), train_b, val_b, cfg)
    gm, _ = fit_group_models(spec, train_b, val_b, cfg, 1, pooled, 4)
    assert np.array_equal(gm.predict_logits(test_b), predict_logits(pooled, test_b))
    assert gm.flags == {}


def test_minority_group_model_sees_its_share():
    ds = data.generate(data.SyntheticConfig(), 0)
    task = prepare_task(ds, data.split(ds, 0))
    spec = BackboneSpec(input_shape=task.train.inputs.shape[1:], channels=(2, 2))
    pooled = pretrain_model(spec, 0)
    gm, _ = fit_group_models(spec, task.train, task.val, TrainConfig(epochs=1), 3, pooled, 0)
    n = len(task.train)
    assert sum(gm.train_counts.values()) == n
    assert gm.train_counts[2] == np.sum(task.train.groups == 2)
    assert abs(gm.train_counts[2] / n - 0.10) < 0.01


def test_group_without_training_data_falls_back(spec, small_task, vanilla):
    keep = np.flatnonzero(small_task.train.groups != 2)
    gm, hist = fit_group_models(spec, small_task.train.take(keep), small_task.val, TrainConfig(epochs=1), 3,
                                vanilla, 0)
    assert 2 in gm.flags and 2 not in gm.models and 2 not in hist
    idx = np.flatnonzero(small_task.test.groups == 2)
    assert np.array_equal(gm.predict_logits(small_task.test.take(idx)),
                          predict_logits(vanilla, small_task.test.take(idx)))


def test_run_method_covers_every_method(vanilla, small_task):
    cfg = TrainConfig(epochs=1, lr=1e-2)
    for method in ("vanilla", "vanilla_finetune_head", "group_models", "concat_fusion", "hyperadapt"):
        res = run_method(method, small_task, vanilla, cfg, cfg, AdapterConfig(), EmbedderConfig(), 0)
        assert res.method == method
        assert sum(res.report.group_counts) == len(small_task.test)
    with pytest.raises(ValueError, match="unknown method"):
        run_method("nope", small_task, vanilla, cfg, cfg, AdapterConfig(), EmbedderConfig(), 0)
