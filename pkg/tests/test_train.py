"""Training engine: interpolation endpoints, the loss draw-order
contract, hand-derived backward formulas, Adam behavior, and the
divergence guards."""

import math

import numpy as np
import pytest

from ditlab.model import DitConfig, dit_forward, init_weights
from ditlab.tensor import Rng
from ditlab.train import (
    Adam,
    FLOW_SCHEDULE,
    TrainConfig,
    TrainingDiverged,
    _check_grads_finite,
    _linear_backward,
    finite_diff_check,
    flow_interpolate,
    fm_loss,
    fm_loss_and_grads,
    randomize_output_projection,
    train,
)


@pytest.fixture(scope="module")
def cfg():
    return DitConfig()


@pytest.fixture(scope="module")
def fresh(cfg):
    return init_weights(cfg, seed=0)


@pytest.fixture(scope="module")
def live(fresh):
    return randomize_output_projection(fresh, seed=1)


def tiny_dataset(count=16, size=16):
    rng = Rng(50)
    images = rng.uniform(count * size * size).reshape(count, size, size)
    labels = np.arange(count) % 4
    return images, labels


# ---------------------------------------------------------------------------
# flow_interpolate


def test_interpolate_endpoints():
    rng = Rng(0)
    x0, eps = rng.normal((2, 4, 4)), rng.normal((2, 4, 4))
    xt, v = flow_interpolate(x0, eps, np.array([0.0, 0.0]))
    assert np.array_equal(xt, x0)
    assert np.array_equal(v, eps - x0)
    xt, v = flow_interpolate(x0, eps, np.array([1.0, 1.0]))
    assert np.array_equal(xt, eps)
    assert np.array_equal(v, eps - x0)


def test_interpolate_degenerate_path():
    x0 = Rng(1).normal((3, 4, 4))
    xt, v = flow_interpolate(x0, x0, np.array([0.3, 0.6, 0.9]))
    assert np.allclose(xt, x0, atol=1e-15)
    assert np.array_equal(v, np.zeros_like(x0))


def test_interpolate_rejects_bad_t():
    x = np.zeros((1, 2, 2))
    with pytest.raises(ValueError):
        flow_interpolate(x, x, np.array([1.5]))


def test_flow_schedule_coefficients():
    t = np.array([0.0, 0.25, 1.0])
    assert np.array_equal(FLOW_SCHEDULE.alpha(t), 1.0 - t)
    assert np.array_equal(FLOW_SCHEDULE.sigma(t), t)


# ---------------------------------------------------------------------------
# fm_loss


def test_exact_predictor_gives_zero_loss_and_pins_draw_order(fresh):
    x0 = Rng(2).uniform(4 * 16 * 16).reshape(4, 16, 16)
    cls = np.array([0, 1, 2, 3])

    # twin stream replays the documented order: t, eps, dropout
    twin = Rng(77)
    t_e = twin.uniform(4)
    eps_e = twin.normal(x0.shape)
    drop_e = twin.uniform(4)
    xt_e, target_e = flow_interpolate(x0, eps_e, t_e)
    cond_e = np.where(drop_e < 0.6, 4, cls)

    seen = {}

    def mock(weights, x_t, t, cond, spec):
        seen["x_t"], seen["t"], seen["cond"] = x_t, t, cond
        return target_e

    loss = fm_loss(fresh, x0, cls, Rng(77), cfg_dropout=0.6, forward_fn=mock)
    assert loss == 0.0
    assert np.array_equal(seen["t"], t_e)
    assert np.array_equal(seen["x_t"], xt_e)
    assert np.array_equal(seen["cond"], cond_e)
    assert (cond_e == 4).any() and (cond_e != 4).any()


def test_zero_network_zero_data_loss_near_one(fresh):
    # prediction is exactly 0, x0 = 0, so loss = mean(eps^2) over the
    # batch draws: close to 1 at batch 32 x 256 pixels
    x0 = np.zeros((32, 16, 16))
    cls = np.zeros(32, dtype=np.int64)
    loss = fm_loss(fresh, x0, cls, Rng(3))
    assert abs(loss - 1.0) < 0.1


def test_loss_non_negative(live):
    images, labels = tiny_dataset(8)
    for seed in range(5):
        assert fm_loss(live, images, labels, Rng(seed)) >= 0.0


def test_loss_and_grads_loss_matches_fm_loss(live):
    images, labels = tiny_dataset(8)
    plain = fm_loss(live, images, labels, Rng(4), cfg_dropout=0.2)
    joint, _ = fm_loss_and_grads(live, images, labels, Rng(4), cfg_dropout=0.2)
    assert joint == plain


# ---------------------------------------------------------------------------
# backward building blocks


def test_linear_backward_closed_form():
    rng = Rng(5)
    x, w, dy = rng.normal((7, 3)), rng.normal((3, 4)), rng.normal((7, 4))
    dx, dw, db = _linear_backward(x, w, dy)
    assert np.max(np.abs(dx - dy @ w.T)) < 1e-10
    assert np.max(np.abs(dw - x.T @ dy)) < 1e-10
    assert np.max(np.abs(db - dy.sum(axis=0))) < 1e-10


def test_gradients_structural_zeros(fresh, live):
    images, labels = tiny_dataset(8)
    # fresh model: the zero output projection blocks all upstream flow,
    # but its own gradient is nonzero
    _, grads = fm_loss_and_grads(fresh, images, labels, Rng(6), cfg_dropout=0.0)
    assert np.any(grads["out_proj.w"] != 0.0)
    assert np.array_equal(grads["class_embed"], np.zeros((5, 64)))
    # live model: class rows receive gradient, the never-sampled null
    # row stays exactly zero when dropout is off
    _, grads = fm_loss_and_grads(live, images, labels, Rng(6), cfg_dropout=0.0)
    assert np.any(grads["class_embed"][:4] != 0.0)
    assert np.array_equal(grads["class_embed"][4], np.zeros(64))


def test_finite_diff_small_probe(live):
    assert finite_diff_check(live, probe_count=8, seed=0) < 1e-4


def test_check_grads_finite_names_parameter():
    grads = {"mlp.w1": np.zeros(3), "attn.wq": np.array([1.0, np.inf])}
    with pytest.raises(TrainingDiverged, match="attn.wq"):
        _check_grads_finite(grads, 12)


# ---------------------------------------------------------------------------
# Adam


def test_adam_zero_grad_keeps_params_bit_identical(fresh):
    params = {k: v.copy() for k, v in fresh.params.items()}
    before = {k: v.copy() for k, v in params.items()}
    opt = Adam(params)
    opt.step(params, {k: np.zeros_like(v) for k, v in params.items()})
    for name in params:
        assert np.array_equal(params[name], before[name])


def test_adam_moves_against_gradient():
    params = {"w": np.array([1.0, 2.0])}
    opt = Adam(params, lr=0.1)
    opt.step(params, {"w": np.array([1.0, -1.0])})
    assert params["w"][0] < 1.0 and params["w"][1] > 2.0


# ---------------------------------------------------------------------------
# train loop


def test_train_steps_zero_keeps_weights(fresh):
    images, labels = tiny_dataset(8)
    result = train(fresh, images, labels, TrainConfig(batch=4, steps=0, seed=0))
    for name in fresh.params:
        assert np.array_equal(result.weights.params[name], fresh.params[name])
    assert math.isnan(result.initial_loss) and math.isnan(result.final_loss)


def test_train_deterministic_across_runs(fresh):
    images, labels = tiny_dataset(16)
    tc = TrainConfig(batch=4, steps=6, seed=9)
    a = train(fresh, images, labels, tc)
    b = train(fresh, images, labels, tc)
    assert np.array_equal(a.losses, b.losses)
    for name in a.weights.params:
        assert np.array_equal(a.weights.params[name], b.weights.params[name])


def test_train_does_not_mutate_input_weights(fresh):
    images, labels = tiny_dataset(8)
    before = {k: v.copy() for k, v in fresh.params.items()}
    train(fresh, images, labels, TrainConfig(batch=4, steps=3, seed=0))
    for name in before:
        assert np.array_equal(fresh.params[name], before[name])


def test_train_divergence_aborts_with_step(fresh):
    images, labels = tiny_dataset(8)
    with pytest.raises(TrainingDiverged, match="step"):
        train(fresh, images, labels, TrainConfig(batch=4, steps=50, lr=1e5, seed=0))


def test_train_loss_csv_format(tmp_path, fresh):
    images, labels = tiny_dataset(8)
    path = tmp_path / "loss.csv"
    result = train(
        fresh, images, labels, TrainConfig(batch=4, steps=4, seed=1),
        loss_csv=str(path),
    )
    lines = path.read_text().splitlines()
    assert lines[0] == "step,loss"
    assert len(lines) == 5
    for s, line in enumerate(lines[1:]):
        step, loss = line.split(",")
        assert int(step) == s
        assert float(loss) == result.losses[s]


def test_train_logs_every_interval(fresh):
    images, labels = tiny_dataset(8)
    seen = []
    train(
        fresh, images, labels, TrainConfig(batch=4, steps=5, seed=0),
        log_every=2, log_fn=seen.append,
    )
    assert len(seen) == 3  # steps 0, 2, 4
    assert seen[0].startswith("step 0:")


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch=0)
    with pytest.raises(ValueError):
        TrainConfig(lr=-1.0)
    with pytest.raises(ValueError):
        TrainConfig(cfg_dropout=1.5)


def test_short_run_reduces_loss(fresh):
    images, labels = tiny_dataset(32)
    result = train(fresh, images, labels, TrainConfig(batch=8, steps=60, seed=0))
    assert result.final_loss < result.initial_loss
    assert result.ratio < 1.0
