"""Desk-scale models and optimizer math, all float64.

Two tasks:

* ``quadratic`` — an analytic bowl, loss = 0.5 * curvature * ||theta||^2
  over a single 1x1 layer. Plain SGD on it obeys w <- (1 - lr*curvature)*w,
  so stability is fully predictable: divergence iff lr >= 2/curvature.
* ``mlp_sin`` — a one-hidden-layer tanh MLP fit to y = sin(3x) + noise
  with mean-squared-error loss and hand-derived analytic gradients.

Gradients are plain dicts keyed like the model: grads[layer]["weight"],
grads[layer]["bias"].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .rng import Xoshiro256StarStar

Grads = dict[str, dict[str, np.ndarray]]


@dataclass
class Layer:
    name: str
    weight: np.ndarray  # (out, in) float64
    bias: np.ndarray  # (out,) float64
    activation: str = "linear"  # "linear" | "tanh"
    dropout_rate: float = 0.0
    init: str = "fan_in_uniform"  # how reinitialize re-draws this layer


class ModelParams:
    """Ordered named layers with unique names."""

    def __init__(self, layers: list[Layer]):
        names = [l.name for l in layers]
        if len(set(names)) != len(names):
            raise ValueError("layer names must be unique")
        self.layers = layers
        self._by_name = {l.name: l for l in layers}

    def layer(self, name: str) -> Layer:
        if name not in self._by_name:
            raise KeyError(name)
        return self._by_name[name]

    def layer_names(self) -> list[str]:
        return [l.name for l in self.layers]

    def all_finite(self) -> bool:
        return all(
            np.isfinite(l.weight).all() and np.isfinite(l.bias).all() for l in self.layers
        )

    def copy(self) -> "ModelParams":
        return ModelParams(
            [
                Layer(l.name, l.weight.copy(), l.bias.copy(), l.activation, l.dropout_rate, l.init)
                for l in self.layers
            ]
        )


@dataclass
class OptimizerState:
    lr: float
    momentum: float = 0.0
    weight_decay: float = 0.0
    grad_clip: float | None = None
    velocity: Grads = field(default_factory=dict)

    def ensure_velocity(self, model: ModelParams) -> None:
        for l in model.layers:
            v = self.velocity.get(l.name)
            if (
                v is None
                or v["weight"].shape != l.weight.shape
                or v["bias"].shape != l.bias.shape
            ):
                self.velocity[l.name] = {
                    "weight": np.zeros_like(l.weight),
                    "bias": np.zeros_like(l.bias),
                }


def zeros_like_grads(model: ModelParams) -> Grads:
    return {
        l.name: {"weight": np.zeros_like(l.weight), "bias": np.zeros_like(l.bias)}
        for l in model.layers
    }


def grads_finite(grads: Grads) -> bool:
    return all(
        np.isfinite(g["weight"]).all() and np.isfinite(g["bias"]).all() for g in grads.values()
    )


def global_grad_norm(grads: Grads) -> float:
    total = 0.0
    # overflow to inf is a fault signal handled upstream, not an error
    with np.errstate(over="ignore", invalid="ignore"):
        for g in grads.values():
            total += float(np.sum(g["weight"] * g["weight"]))
            total += float(np.sum(g["bias"] * g["bias"]))
    return math.sqrt(total) if total >= 0 else float("nan")


def clip_gradients(grads: Grads, threshold: float) -> tuple[Grads, float]:
    """Global-norm clipping. Returns (possibly scaled grads, pre-clip norm)."""
    if threshold <= 0:
        raise ValueError("clip threshold must be positive")
    pre_norm = global_grad_norm(grads)
    if pre_norm <= threshold:
        return grads, pre_norm
    factor = threshold / pre_norm
    clipped = {
        name: {"weight": g["weight"] * factor, "bias": g["bias"] * factor}
        for name, g in grads.items()
    }
    return clipped, pre_norm


def sgd_momentum_step(model: ModelParams, grads: Grads, opt: OptimizerState) -> tuple[ModelParams, OptimizerState]:
    """v' = momentum*v + g + weight_decay*theta ; theta' = theta - lr*v'.

    Updates model and velocity in place and returns them.
    """
    opt.ensure_velocity(model)
    for l in model.layers:
        g = grads[l.name]
        v = opt.velocity[l.name]
        v["weight"] = opt.momentum * v["weight"] + g["weight"] + opt.weight_decay * l.weight
        v["bias"] = opt.momentum * v["bias"] + g["bias"] + opt.weight_decay * l.bias
        l.weight = l.weight - opt.lr * v["weight"]
        l.bias = l.bias - opt.lr * v["bias"]
    return model, opt


# ---------------------------------------------------------------------------
# Model builders / initializers
# ---------------------------------------------------------------------------


def init_layer(layer: Layer, rng: Xoshiro256StarStar) -> None:
    """(Re-)draw a layer's parameters from its initializer."""
    if layer.init == "bowl_start":
        layer.weight = np.ones_like(layer.weight)
        layer.bias = np.zeros_like(layer.bias)
        return
    fan_in = layer.weight.shape[1]
    bound = 1.0 / math.sqrt(fan_in)
    layer.weight = rng.uniform_array(layer.weight.shape, -bound, bound)
    layer.bias = rng.uniform_array(layer.bias.shape, -bound, bound)


def build_quadratic_model() -> ModelParams:
    # Fixed start at w = 1 so the bowl's trajectory has a closed form.
    layer = Layer(
        name="w",
        weight=np.ones((1, 1)),
        bias=np.zeros((1,)),
        activation="linear",
        init="bowl_start",
    )
    return ModelParams([layer])


def build_mlp(rng: Xoshiro256StarStar, hidden_width: int) -> ModelParams:
    h1 = Layer(
        name="h1",
        weight=np.empty((hidden_width, 1)),
        bias=np.empty((hidden_width,)),
        activation="tanh",
    )
    out = Layer(
        name="out",
        weight=np.empty((1, hidden_width)),
        bias=np.empty((1,)),
        activation="linear",
    )
    model = ModelParams([h1, out])
    for layer in model.layers:
        init_layer(layer, rng)
    return model


# ---------------------------------------------------------------------------
# Loss / gradients
# ---------------------------------------------------------------------------


def quadratic_loss_grads(model: ModelParams, curvature: float) -> tuple[float, Grads]:
    """loss = 0.5 * curvature * sum(theta^2); grad = curvature * theta."""
    loss = 0.0
    grads: Grads = {}
    with np.errstate(over="ignore", invalid="ignore"):
        for l in model.layers:
            loss += 0.5 * curvature * (float(np.sum(l.weight**2)) + float(np.sum(l.bias**2)))
            grads[l.name] = {"weight": curvature * l.weight, "bias": curvature * l.bias}
    return loss, grads


def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "tanh":
        return np.tanh(z)
    if activation == "linear":
        return z
    raise ValueError(f"unknown activation {activation!r}")


def mlp_forward(
    model: ModelParams,
    x: np.ndarray,
    rng: Xoshiro256StarStar | None = None,
    training: bool = False,
) -> tuple[np.ndarray, list[dict]]:
    """Forward pass. x is (B, in). Dropout masks are drawn from ``rng`` only
    when training with a positive rate, in layer order, row-major."""
    a = x
    caches = []
    for l in model.layers:
        z = a @ l.weight.T + l.bias
        act = _activate(z, l.activation)
        mask = None
        if training and l.dropout_rate > 0.0:
            if rng is None:
                raise ValueError("dropout requires an rng during training")
            keep = 1.0 - l.dropout_rate
            u = rng.uniform_array(act.shape, 0.0, 1.0)
            mask = (u >= l.dropout_rate).astype(np.float64) / keep
            act = act * mask
        caches.append({"a_in": a, "z": z, "mask": mask})
        a = act
    return a, caches


def mlp_loss_grads(
    model: ModelParams,
    x: np.ndarray,
    y: np.ndarray,
    rng: Xoshiro256StarStar | None = None,
    training: bool = True,
) -> tuple[float, Grads]:
    """Mean-squared-error loss and analytic gradients for the layer stack."""
    if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ValueError("x and y must be (batch, dim) with matching batch")
    if x.shape[0] == 0:
        raise ValueError("batch must be non-empty")
    out, caches = mlp_forward(model, x, rng, training)
    batch = x.shape[0]
    diff = out - y
    loss = float(np.sum(diff * diff)) / batch

    grads: Grads = {}
    d_act = 2.0 * diff / batch
    for l, cache in zip(reversed(model.layers), reversed(caches)):
        if cache["mask"] is not None:
            d_act = d_act * cache["mask"]
        if l.activation == "tanh":
            t = np.tanh(cache["z"])
            d_z = d_act * (1.0 - t * t)
        else:
            d_z = d_act
        grads[l.name] = {
            "weight": d_z.T @ cache["a_in"],
            "bias": d_z.sum(axis=0),
        }
        d_act = d_z @ l.weight
    return loss, grads


def mlp_evaluate(model: ModelParams, x: np.ndarray, y: np.ndarray) -> float:
    """Deterministic mean loss over a full set, dropout disabled."""
    if x.shape[0] == 0:
        raise ValueError("validation set must be non-empty")
    out, _ = mlp_forward(model, x, rng=None, training=False)
    diff = out - y
    return float(np.sum(diff * diff)) / x.shape[0]
