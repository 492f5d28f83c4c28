import math
import random

import numpy as np
import pytest

from livetrain.nets import (
    Layer,
    ModelParams,
    OptimizerState,
    build_mlp,
    build_quadratic_model,
    clip_gradients,
    global_grad_norm,
    init_layer,
    mlp_evaluate,
    mlp_forward,
    mlp_loss_grads,
    quadratic_loss_grads,
    sgd_momentum_step,
    zeros_like_grads,
)
from livetrain.rng import Xoshiro256StarStar


def loss_only(model, x, y, rng_state, training):
    rng = Xoshiro256StarStar.fromstate(rng_state) if rng_state else None
    loss, _ = mlp_loss_grads(model, x, y, rng, training)
    return loss


def finite_diff_grads(model, x, y, h=1e-6, rng_state=None, training=False):
    """Independent central-difference oracle over every parameter."""
    out = {}
    for layer in model.layers:
        out[layer.name] = {}
        for pname in ("weight", "bias"):
            arr = getattr(layer, pname)
            g = np.zeros_like(arr)
            it = np.nditer(arr, flags=["multi_index"])
            for _ in it:
                idx = it.multi_index
                orig = arr[idx]
                arr[idx] = orig + h
                lp = loss_only(model, x, y, rng_state, training)
                arr[idx] = orig - h
                lm = loss_only(model, x, y, rng_state, training)
                arr[idx] = orig
                g[idx] = (lp - lm) / (2.0 * h)
            out[layer.name][pname] = g
    return out


def grads_gap(ga, gb):
    total = 0.0
    for name in ga:
        for pname in ("weight", "bias"):
            total += float(np.sum((ga[name][pname] - gb[name][pname]) ** 2))
    return math.sqrt(total)


# ---------------------------------------------------------------------------
# Closed forms
# ---------------------------------------------------------------------------


def test_quadratic_bowl_closed_form():
    model = build_quadratic_model()
    loss, grads = quadratic_loss_grads(model, 500.0)
    assert loss == 250.0
    assert grads["w"]["weight"][0, 0] == 500.0
    assert grads["w"]["bias"][0] == 0.0


def test_zero_mlp_zero_targets():
    model = build_mlp(Xoshiro256StarStar(0), 8)
    for layer in model.layers:
        layer.weight[:] = 0.0
        layer.bias[:] = 0.0
    x = np.linspace(-1, 1, 16).reshape(-1, 1)
    y = np.zeros((16, 1))
    loss, grads = mlp_loss_grads(model, x, y, training=False)
    assert loss == 0.0
    assert global_grad_norm(grads) == 0.0


def test_gradients_match_finite_differences():
    rnd = random.Random(1)
    for case in range(100):
        width = rnd.choice([2, 4, 8, 16])
        batch = rnd.choice([1, 3, 8])
        rng = Xoshiro256StarStar(case)
        model = build_mlp(rng, width)
        x = rng.uniform_array((batch, 1), -1.0, 1.0)
        y = rng.uniform_array((batch, 1), -1.0, 1.0)
        _, analytic = mlp_loss_grads(model, x, y, training=False)
        fd = finite_diff_grads(model, x, y)
        gap = grads_gap(analytic, fd)
        scale = max(1.0, global_grad_norm(analytic))
        assert gap <= 1e-6 * scale, f"case {case}: gap {gap:.3e} scale {scale:.3e}"


def test_gradients_with_fixed_dropout_mask_match_finite_differences():
    for case in range(5):
        rng = Xoshiro256StarStar(100 + case)
        model = build_mlp(rng, 8)
        model.layer("h1").dropout_rate = 0.4
        x = rng.uniform_array((6, 1), -1.0, 1.0)
        y = rng.uniform_array((6, 1), -1.0, 1.0)
        state = rng.getstate()
        _, analytic = mlp_loss_grads(
            model, x, y, Xoshiro256StarStar.fromstate(state), training=True
        )
        fd = finite_diff_grads(model, x, y, rng_state=state, training=True)
        gap = grads_gap(analytic, fd)
        assert gap <= 1e-6 * max(1.0, global_grad_norm(analytic))


# ---------------------------------------------------------------------------
# Clipping
# ---------------------------------------------------------------------------


def grads_345():
    return {"w": {"weight": np.array([[3.0]]), "bias": np.array([4.0])}}


def test_clip_3_4_5_closed_form():
    clipped, pre = clip_gradients(grads_345(), 2.5)
    assert pre == 5.0
    assert clipped["w"]["weight"][0, 0] == pytest.approx(1.5, abs=1e-15)
    assert clipped["w"]["bias"][0] == pytest.approx(2.0, abs=1e-15)


def test_clip_noop_below_threshold():
    clipped, pre = clip_gradients(grads_345(), 10.0)
    assert pre == 5.0
    assert clipped["w"]["weight"][0, 0] == 3.0
    assert clipped["w"]["bias"][0] == 4.0


def test_clip_property_random():
    rng = Xoshiro256StarStar(99)
    for _ in range(1000):
        g = {
            "a": {
                "weight": rng.uniform_array((3, 2), -10, 10),
                "bias": rng.uniform_array((3,), -10, 10),
            },
            "b": {
                "weight": rng.uniform_array((1, 3), -10, 10),
                "bias": rng.uniform_array((1,), -10, 10),
            },
        }
        threshold = rng.uniform(0.01, 20.0)
        clipped, pre = clip_gradients(g, threshold)
        post = global_grad_norm(clipped)
        expected = min(pre, threshold)
        assert abs(post - expected) <= 1e-12 * max(1.0, expected)


def test_clip_rejects_bad_threshold():
    with pytest.raises(ValueError):
        clip_gradients(grads_345(), 0.0)


# ---------------------------------------------------------------------------
# SGD with momentum
# ---------------------------------------------------------------------------


def test_plain_sgd_on_w_squared():
    # f(w) = w^2 is the bowl with curvature 2: grad = 2w; lr 0.1 from w=1 -> 0.8
    model = build_quadratic_model()
    opt = OptimizerState(lr=0.1)
    _, grads = quadratic_loss_grads(model, 2.0)
    sgd_momentum_step(model, grads, opt)
    assert model.layer("w").weight[0, 0] == pytest.approx(0.8, abs=1e-15)


def test_zero_grads_leave_params():
    model = build_mlp(Xoshiro256StarStar(5), 4)
    before = model.copy()
    opt = OptimizerState(lr=0.5)
    sgd_momentum_step(model, zeros_like_grads(model), opt)
    for a, b in zip(model.layers, before.layers):
        assert np.array_equal(a.weight, b.weight)
        assert np.array_equal(a.bias, b.bias)


@pytest.mark.parametrize("momentum,weight_decay", [(0.0, 0.0), (0.9, 0.0), (0.5, 0.01)])
def test_ten_step_bowl_matches_scalar_recurrence(momentum, weight_decay):
    # Independent scalar oracle: v <- m*v + c*w + wd*w ; w <- w - lr*v
    curvature, lr = 500.0, 1e-3
    w, v = 1.0, 0.0
    oracle = []
    for _ in range(10):
        v = momentum * v + curvature * w + weight_decay * w
        w = w - lr * v
        oracle.append(w)

    model = build_quadratic_model()
    opt = OptimizerState(lr=lr, momentum=momentum, weight_decay=weight_decay)
    trajectory = []
    for _ in range(10):
        _, grads = quadratic_loss_grads(model, curvature)
        sgd_momentum_step(model, grads, opt)
        trajectory.append(float(model.layer("w").weight[0, 0]))

    for got, want in zip(trajectory, oracle):
        assert abs(got - want) <= 1e-12 * max(1.0, abs(want))


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def test_evaluate_perfect_fit_zero():
    model = build_mlp(Xoshiro256StarStar(2), 4)
    x = np.linspace(-1, 1, 32).reshape(-1, 1)
    y, _ = mlp_forward(model, x)
    assert mlp_evaluate(model, x, y) == 0.0


def test_evaluate_deterministic_and_ignores_dropout():
    model = build_mlp(Xoshiro256StarStar(3), 8)
    model.layer("h1").dropout_rate = 0.5
    x = np.linspace(-1, 1, 64).reshape(-1, 1)
    y = np.sin(3 * x)
    assert mlp_evaluate(model, x, y) == mlp_evaluate(model, x, y)


def test_evaluate_matches_single_pass_mean_oracle():
    model = build_mlp(Xoshiro256StarStar(4), 16)
    rng = Xoshiro256StarStar(77)
    x = rng.uniform_array((128, 1), -1.0, 1.0)
    y = rng.uniform_array((128, 1), -1.0, 1.0)
    got = mlp_evaluate(model, x, y)
    # oracle: explicit per-example loop
    total = 0.0
    for i in range(x.shape[0]):
        pred, _ = mlp_forward(model, x[i : i + 1])
        total += float((pred[0, 0] - y[i, 0]) ** 2)
    want = total / x.shape[0]
    assert abs(got - want) <= 1e-12 * max(1.0, abs(want))


def test_reinitialize_draws_fan_in_uniform():
    rng = Xoshiro256StarStar(8)
    model = build_mlp(rng, 16)
    layer = model.layer("h1")
    layer.weight[:] = np.nan
    init_layer(layer, rng)
    bound = 1.0
    assert np.isfinite(layer.weight).all()
    assert (np.abs(layer.weight) < bound).all()
    out = model.layer("out")
    init_layer(out, rng)
    assert (np.abs(out.weight) < 1.0 / math.sqrt(16)).all()


def test_bowl_reinit_restores_start():
    model = build_quadratic_model()
    layer = model.layer("w")
    layer.weight[0, 0] = np.inf
    init_layer(layer, Xoshiro256StarStar(0))
    assert layer.weight[0, 0] == 1.0


def test_layer_name_uniqueness_enforced():
    a = Layer("x", np.zeros((1, 1)), np.zeros((1,)))
    b = Layer("x", np.zeros((1, 1)), np.zeros((1,)))
    with pytest.raises(ValueError):
        ModelParams([a, b])


def test_unknown_layer_lookup_raises():
    model = build_quadratic_model()
    with pytest.raises(KeyError):
        model.layer("nope")
