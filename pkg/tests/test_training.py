import math

import numpy as np
import pytest
from conftest import tiny_model
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from acsa import autodiff as ad
from acsa.autodiff import Node, ParamGroup
from acsa.data import Example, collate
from acsa.evaluation import PRF, EvalReport
from acsa.model import JointModel, ModelConfig
from acsa.training import (
    AdamState,
    TrainConfig,
    acd_loss,
    adam_step,
    batch_loss,
    l2_penalty,
    run_repeated,
    sc_loss,
    total_loss,
    train,
)

LN2 = math.log(2.0)


# ---------------------------------------------------------------------------
# losses


def test_acd_loss_examples():
    assert acd_loss([1.0], [0.5]).value == pytest.approx(LN2, abs=1e-15)
    assert acd_loss([0.0], [0.5]).value == pytest.approx(LN2, abs=1e-15)
    assert acd_loss([1.0, 0.0], [1 - 1e-12, 1e-12]).value == pytest.approx(0.0, abs=1e-10)


def test_acd_loss_is_per_row_for_batches():
    out = acd_loss([[1.0], [0.0]], [[0.5], [0.25]])
    np.testing.assert_allclose(out.value, [LN2, -math.log(0.75)])


def test_sc_loss_examples():
    rng = np.random.default_rng(0)
    probs = rng.dirichlet(np.ones(3), size=2)
    assert sc_loss(np.zeros((2, 3)), probs).value == 0.0
    assert sc_loss([[0, 1, 0, 0]], [[0.25] * 4]).value == pytest.approx(math.log(4), abs=1e-15)
    assert sc_loss([[1, 0]], [[1 - 1e-12, 1e-12]]).value == pytest.approx(0.0, abs=1e-10)


def test_sc_loss_rejects_multi_hot():
    with pytest.raises(ValueError):
        sc_loss([[1, 1, 0]], [[0.3, 0.3, 0.4]])


def test_sc_loss_unmentioned_rows_are_neutral():
    y = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 0.0]])
    y_hat = ad.parameter(np.array([[0.2, 0.5, 0.3], [0.1, 0.1, 0.8]]))
    base = sc_loss(y, y_hat).value
    ad.backward(sc_loss(y, y_hat))
    np.testing.assert_array_equal(y_hat.grad[1], 0.0)
    perturbed = y_hat.value.copy()
    perturbed[1] = [0.7, 0.2, 0.1]
    assert sc_loss(y, perturbed).value == base


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 5), st.integers(2, 4))
def test_losses_non_negative(seed, n, m):
    rng = np.random.default_rng(seed)
    y_A = (rng.random(n) < 0.5).astype(float)
    y_S = np.zeros((n, m))
    for j in np.flatnonzero(y_A):
        y_S[j, rng.integers(m)] = 1.0
    assert acd_loss(y_A, rng.random(n)).value >= 0
    assert sc_loss(y_S, rng.dirichlet(np.ones(m), size=n)).value >= 0


def _groups():
    theta = ad.parameter([2.0])
    w = ad.parameter([[3.0, -1.0]])
    return theta, w, [ParamGroup("head", [theta], "shared"), ParamGroup("bilstm", [w], "bilstm")]


def test_l2_examples():
    theta, w, groups = _groups()
    assert l2_penalty(groups, 0.0).value == 0.0
    assert l2_penalty(groups, 0.01).value == pytest.approx(0.04, abs=1e-17)
    w.value = w.value * 2
    assert l2_penalty(groups, 0.01).value == pytest.approx(0.04, abs=1e-17)


def test_l2_bilstm_gradient_is_zero():
    model = tiny_model()
    report = ad.finite_diff_check(lambda: l2_penalty(model.groups, 0.01), model.groups)
    model.zero_grad()
    ad.backward(l2_penalty(model.groups, 0.01))
    for n in model.lstm_fwd.nodes() + model.lstm_bwd.nodes():
        assert n.grad is None or not np.any(n.grad)
    assert report["bilstm"] == 0.0
    assert max(report.values()) < 1e-6


def test_total_loss_examples():
    assert total_loss(1.0, 2.0, 0.0, 1.0).value == 3.0
    assert total_loss(1.0, 2.0, 0.1, 0.6).value == pytest.approx(2.3, abs=1e-15)
    assert total_loss(1.5, 0.0, 0.2).value == pytest.approx(1.7, abs=1e-15)


def test_total_loss_means_over_batch_and_adds_penalty_once():
    out = total_loss(np.array([1.0, 3.0]), np.array([0.0, 2.0]), 0.5, 1.0)
    assert out.value == pytest.approx((1.0 + 5.0) / 2 + 0.5)


# ---------------------------------------------------------------------------
# Adam


def test_adam_zero_gradient():
    p = ad.parameter([1.0, -2.0])
    state = AdamState.for_params([p])
    adam_step(state, [p], 0.1, grads=[np.zeros(2)])
    np.testing.assert_array_equal(p.value, [1.0, -2.0])
    assert state.t == 1


def test_adam_first_step_is_sign():
    p = ad.parameter([0.0, 0.0])
    state = AdamState.for_params([p])
    adam_step(state, [p], 0.01, grads=[np.array([3.0, -0.5])])
    np.testing.assert_allclose(p.value, [-0.01, 0.01], rtol=1e-7)


def test_adam_matches_scalar_oracle():
    p = ad.parameter([1.0])
    state = AdamState.for_params([p])
    ours = []
    for _ in range(2):
        p.grad = None
        ad.backward(ad.sum(ad.mul(p, p)))
        adam_step(state, [p], 0.1)
        ours.append(p.value[0])
    ref = oracles.adam(lambda t: 2 * t, 1.0, 0.1, 2)
    np.testing.assert_allclose(ours, ref, rtol=0, atol=1e-15)


def test_adam_shape_mismatch():
    p = ad.parameter([1.0, 2.0])
    with pytest.raises(ad.ShapeError):
        adam_step(AdamState.for_params([p]), [p], 0.1, grads=[np.zeros(3)])


def test_train_config_validation():
    for bad in ({"tau": 1.0}, {"dropout_p": 1.0}, {"learning_rate": -1}, {"runs": 0}, {"clip_norm": 0}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


# ---------------------------------------------------------------------------
# training loop


def _small(examples, variant="full", seed=0, n_aspects=5):
    cfg = ModelConfig(vocab_size=64, n_aspects=n_aspects, n_polarities=3, d_w=6, d_s=4, hidden=6,
                      variant=variant, dropout=0.5)
    return JointModel(cfg, seed=seed)


def _quick(**kw):
    base = dict(max_epochs=2, batch_size=8, runs=1, patience=5)
    base.update(kw)
    return TrainConfig(**base)


def test_training_is_deterministic(synthetic):
    exs = synthetic[3][:24]
    logs = []
    for _ in range(2):
        model = _small(exs)
        result = train(model, exs[:20], exs[20:], _quick(max_epochs=3))
        logs.append(([r.train_loss for r in result.history], model.state()))
    assert logs[0][0] == logs[1][0]
    for name, value in logs[0][1].items():
        assert value.tobytes() == logs[1][1][name].tobytes()


def test_zero_learning_rate_leaves_parameters(synthetic):
    exs = synthetic[3][:16]
    model = _small(exs)
    before = model.state()
    train(model, exs[:12], exs[12:], _quick(max_epochs=1, learning_rate=0.0))
    for name, value in model.state().items():
        np.testing.assert_array_equal(value, before[name])


def test_train_rejects_empty_set(synthetic):
    with pytest.raises(ValueError):
        train(_small([]), [], synthetic[3][:2], _quick())


def test_epoch_records_are_json_lines(synthetic):
    import json

    exs = synthetic[3][:12]
    seen = []
    train(_small(exs), exs[:10], exs[10:], _quick(max_epochs=2), on_epoch=seen.append)
    rows = [json.loads(r.to_json()) for r in seen]
    assert [r["epoch"] for r in rows] == [1, 2]
    assert {"train_loss", "l_a", "l_s", "penalty", "val"} <= set(rows[0])
    assert {"acsa_f1", "acd_f1", "sc_acc"} <= set(rows[0]["val"])


def test_best_checkpoint_has_max_validation_f1(synthetic):
    exs = synthetic[3][:30]
    model = _small(exs)
    result = train(model, exs[:25], exs[25:], _quick(max_epochs=6, learning_rate=0.01))
    best = max(r.val["acsa_f1"] for r in result.history)
    assert result.best.val_f1 == best


def test_one_step_decreases_loss():
    rng = np.random.default_rng(123)
    for seed in range(20):
        model = tiny_model(seed=seed, vocab_size=10, embed_scale=0.25)
        ids = rng.integers(2, 10, rng.integers(2, 7))
        y_A = np.array([1.0, 0.0])
        y_S = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 0.0]])
        batch = collate([Example(ids, np.ones(len(ids), bool), y_A, y_S)])
        config = TrainConfig(learning_rate=1e-4)
        params = model.trainable()
        before = batch_loss(model, batch, config, train=False)[0]
        ad.backward(before)
        ad.clip_gradient_norm(params, config.clip_norm)
        adam_step(AdamState.for_params(params), params, config.learning_rate)
        after = batch_loss(model, batch, config, train=False)[0].value
        assert after < before.value or abs(after - before.value) < 1e-10, f"seed {seed}"


# ---------------------------------------------------------------------------
# repeated runs


def test_run_repeated_single_run_is_its_report(synthetic):
    exs = synthetic[3][:12]
    res = run_repeated(lambda s: _small(exs, seed=s), exs[:10], exs[10:], _quick(max_epochs=1))
    assert len(res.runs) == 1
    only = res.runs[0].report
    assert (res.report.acsa, res.report.acd, res.report.sc_accuracy) == (only.acsa, only.acd, only.sc_accuracy)


def test_run_repeated_same_seed_has_no_variance(synthetic):
    exs = synthetic[3][:12]
    res = run_repeated(lambda s: _small(exs, seed=s), exs[:10], exs[10:], _quick(max_epochs=1, runs=3),
                       seeds=[4, 4, 4])
    f1s = {o.report.acsa.f1 for o in res.runs}
    accs = {o.report.sc_accuracy for o in res.runs}
    assert len(f1s) == 1 and len(accs) == 1
    assert res.report.acsa.f1 == res.runs[0].report.acsa.f1


def test_run_repeated_seeds_increment(synthetic):
    exs = synthetic[3][:12]
    res = run_repeated(lambda s: _small(exs, seed=s), exs[:10], exs[10:], _quick(max_epochs=1, runs=3, seed=7))
    assert [o.seed for o in res.runs] == [7, 8, 9]


def test_mean_of_three_runs():
    from acsa.evaluation import average_runs

    reports = [EvalReport(PRF(f, f, f), PRF(f, f, f), f) for f in (0.5, 0.6, 0.7)]
    assert average_runs(reports).acsa.f1 == pytest.approx(0.6, abs=1e-15)


def test_dropout_is_active_during_training(synthetic):
    exs = synthetic[3][:4]
    model = _small(exs)
    batch = collate(exs)
    config = TrainConfig()
    a = batch_loss(model, batch, config, np.random.default_rng(0))[0].value
    b = batch_loss(model, batch, config, np.random.default_rng(1))[0].value
    assert a != b
    assert isinstance(batch_loss(model, batch, config, train=False)[0], Node)
