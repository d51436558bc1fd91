"""Dense feed-forward networks with hand-written reverse-mode gradients.

Everything here works on float64 numpy arrays. A network is an ordered list of
affine layers, each followed by ReLU or identity; softmax is applied outside the
network by the losses. The loss kinds mirror what source training and target
adaptation need:

* ``cross_entropy_hard``  mean CE against integer labels
* ``weighted_mi``         negative class-weighted mutual information
* ``hd_to_anchor``        mean CE of the network's rows against fixed anchor rows
* ``composite``           ``alpha * weighted_mi + beta * hd_to_anchor``
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from pdsfda.errors import ConfigError, NumericError, ShapeError

PROB_FLOOR = 1e-12
ACTIVATIONS = ("relu", "identity")
LOSS_KINDS = ("cross_entropy_hard", "weighted_mi", "hd_to_anchor", "composite")


@dataclass
class Layer:
    W: np.ndarray  # (in, out)
    b: np.ndarray  # (out,)
    activation: str = "relu"

    @property
    def in_dim(self) -> int:
        return self.W.shape[0]

    @property
    def out_dim(self) -> int:
        return self.W.shape[1]


@dataclass
class ParamSet:
    """Parameters of one dense network."""

    layers: list[Layer] = field(default_factory=list)

    def __post_init__(self):
        for k, layer in enumerate(self.layers):
            if layer.activation not in ACTIVATIONS:
                raise ConfigError(f"layer {k}: unknown activation {layer.activation!r}")
            if layer.W.ndim != 2 or layer.b.shape != (layer.W.shape[1],):
                raise ShapeError(f"layer {k}: W {layer.W.shape} and b {layer.b.shape} disagree")
            if k and self.layers[k - 1].out_dim != layer.in_dim:
                raise ShapeError(
                    f"layer {k} expects {layer.in_dim} inputs, previous layer emits "
                    f"{self.layers[k - 1].out_dim}"
                )

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def __len__(self) -> int:
        return len(self.layers)

    def copy(self) -> "ParamSet":
        return ParamSet([Layer(l.W.copy(), l.b.copy(), l.activation) for l in self.layers])

    def is_finite(self) -> bool:
        return all(np.isfinite(l.W).all() and np.isfinite(l.b).all() for l in self.layers)

    def flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([l.W.ravel(), l.b]) for l in self.layers])


@dataclass
class GradientSet:
    """Per-layer ``(dW, db)`` pairs, shape-congruent with a ParamSet."""

    layers: list[tuple[np.ndarray, np.ndarray]]

    def __add__(self, other: "GradientSet") -> "GradientSet":
        return GradientSet([(a + c, b + d) for (a, b), (c, d) in zip(self.layers, other.layers)])

    def flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([dW.ravel(), db]) for dW, db in self.layers])

    def is_finite(self) -> bool:
        return all(np.isfinite(dW).all() and np.isfinite(db).all() for dW, db in self.layers)


def init_params(widths: Sequence[int], rng: np.random.Generator,
                activations: Sequence[str] | None = None) -> ParamSet:
    """Uniform init scaled by fan-in, zero biases.

    ``widths`` lists every dimension including the input, so ``[2, 8, 3]`` is
    two layers. Default activations are ReLU everywhere.
    """
    if len(widths) < 2 or any(int(w) < 1 for w in widths):
        raise ConfigError(f"invalid widths {list(widths)}")
    n = len(widths) - 1
    activations = list(activations) if activations is not None else ["relu"] * n
    if len(activations) != n:
        raise ConfigError("one activation per layer required")
    layers = []
    for fan_in, fan_out, act in zip(widths[:-1], widths[1:], activations):
        limit = np.sqrt(6.0 / fan_in) if act == "relu" else np.sqrt(3.0 / fan_in)
        W = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        layers.append(Layer(W, np.zeros(fan_out), act))
    return ParamSet(layers)


def chain(*parts: ParamSet) -> ParamSet:
    """Concatenate networks without copying their arrays."""
    return ParamSet([layer for p in parts for layer in p.layers])


def _check_batch(params: ParamSet, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != params.in_dim:
        raise ShapeError(f"batch of shape {X.shape} does not match input dim {params.in_dim}")
    return X


def _forward_cache(params: ParamSet, X: np.ndarray):
    inputs, pre = [], []
    h = X
    for layer in params.layers:
        inputs.append(h)
        z = h @ layer.W + layer.b
        pre.append(z)
        h = np.maximum(z, 0.0) if layer.activation == "relu" else z
    return h, inputs, pre


def forward(params: ParamSet, batch) -> np.ndarray:
    """Outputs of the last layer (logits for a classifier head)."""
    out, _, _ = _forward_cache(params, _check_batch(params, batch))
    return out


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def clamp(p) -> np.ndarray:
    return np.clip(p, PROB_FLOOR, 1.0)


def _xlogx_grad(p: np.ndarray) -> np.ndarray:
    # d/dp [p * log(clamp(p))]
    return np.log(clamp(p)) + (p > PROB_FLOOR)


# ---------------------------------------------------------------------------
# losses on probability rows: each returns (value, dL/dp)
# ---------------------------------------------------------------------------

def _ce_hard(p, targets):
    targets = np.asarray(targets)
    if targets.shape != (p.shape[0],):
        raise ShapeError("one target label per row required")
    n = p.shape[0]
    rows = np.arange(n)
    py = p[rows, targets]
    loss = -np.mean(np.log(clamp(py)))
    g = np.zeros_like(p)
    g[rows, targets] = np.where(py > PROB_FLOOR, -1.0 / (n * np.maximum(py, PROB_FLOOR)), 0.0)
    return loss, g


def _neg_weighted_mi(p, weights, marginal_mass=None, marginal_count=0):
    """-(sum_c -W_c m_c log m_c  -  mean_n H(p_n)).

    ``marginal_mass``/``marginal_count`` fold in rows outside the batch (held
    constant) when the marginal is taken over a larger sample.
    """
    n, C = p.shape
    W = np.asarray(weights, dtype=np.float64)
    if W.shape != (C,):
        raise ShapeError(f"class weights of length {W.shape} for {C} classes")
    total = n + marginal_count
    mass = p.sum(axis=0) + (0.0 if marginal_mass is None else np.asarray(marginal_mass))
    m = mass / total
    marg_ent = -np.sum(W * m * np.log(clamp(m)))
    cond_ent = -np.sum(p * np.log(clamp(p))) / n
    loss = -(marg_ent - cond_ent)
    g = (W * _xlogx_grad(m))[None, :] / total - _xlogx_grad(p) / n
    return loss, g


def _hd(p, anchor):
    anchor = np.asarray(anchor, dtype=np.float64)
    if anchor.shape != p.shape:
        raise ShapeError(f"anchor {anchor.shape} vs predictions {p.shape}")
    n = p.shape[0]
    loss = -np.sum(anchor * np.log(clamp(p))) / n
    g = np.where(p > PROB_FLOOR, -anchor / (n * np.maximum(p, PROB_FLOOR)), 0.0)
    return loss, g


def prob_loss(p: np.ndarray, loss_kind: str, **args) -> tuple[float, np.ndarray]:
    """Evaluate a loss on softmax rows; returns the value and its gradient in ``p``."""
    if loss_kind == "cross_entropy_hard":
        return _ce_hard(p, args["targets"])
    if loss_kind == "weighted_mi":
        return _neg_weighted_mi(p, args["weights"], args.get("marginal_mass"),
                                args.get("marginal_count", 0))
    if loss_kind == "hd_to_anchor":
        return _hd(p, args["anchor"])
    if loss_kind == "composite":
        alpha, beta = float(args.get("alpha", 1.0)), float(args.get("beta", 0.0))
        loss, g = 0.0, np.zeros_like(p)
        if alpha:
            l1, g1 = _neg_weighted_mi(p, args["weights"], args.get("marginal_mass"),
                                      args.get("marginal_count", 0))
            loss, g = loss + alpha * l1, g + alpha * g1
        if beta:
            l2, g2 = _hd(p, args["anchor"])
            loss, g = loss + beta * l2, g + beta * g2
        return float(loss), g
    raise ConfigError(f"unknown loss kind {loss_kind!r}; expected one of {LOSS_KINDS}")


def softmax_backward(p: np.ndarray, grad_p: np.ndarray) -> np.ndarray:
    return p * (grad_p - np.sum(grad_p * p, axis=1, keepdims=True))


def backprop(params: ParamSet, inputs, pre, grad_out: np.ndarray) -> GradientSet:
    grads = []
    delta = grad_out
    for k in range(len(params.layers) - 1, -1, -1):
        layer = params.layers[k]
        if layer.activation == "relu":
            delta = delta * (pre[k] > 0)
        grads.append((inputs[k].T @ delta, delta.sum(axis=0)))
        if k:
            delta = delta @ layer.W.T
    grads.reverse()
    return GradientSet(grads)


def backward(params: ParamSet, batch, loss_kind: str, **loss_args) -> tuple[float, GradientSet]:
    """Loss of ``softmax(forward(params, batch))`` and its parameter gradient."""
    X = _check_batch(params, batch)
    logits, inputs, pre = _forward_cache(params, X)
    p = softmax(logits)
    loss, grad_p = prob_loss(p, loss_kind, **loss_args)
    grads = backprop(params, inputs, pre, softmax_backward(p, grad_p))
    if not np.isfinite(loss) or not grads.is_finite():
        raise NumericError(f"non-finite loss or gradient for {loss_kind}")
    return float(loss), grads


def zero_grads(params: ParamSet) -> GradientSet:
    return GradientSet([(np.zeros_like(l.W), np.zeros_like(l.b)) for l in params.layers])


def sgd_step(params: ParamSet, grads: GradientSet, lr: float,
             frozen_mask: Sequence[bool] | bool | None = None,
             momentum: float = 0.0, velocity: GradientSet | None = None) -> ParamSet:
    """Return ``p - lr * g`` for unfrozen layers.

    Frozen layers are passed through as the very same array objects. With
    ``momentum > 0`` the caller-owned ``velocity`` is updated in place.
    """
    if lr < 0:
        raise ConfigError("learning rate must be non-negative")
    if len(grads.layers) != len(params.layers):
        raise ShapeError("gradient set does not match parameter set")
    if frozen_mask is None:
        frozen_mask = [False] * len(params)
    elif isinstance(frozen_mask, bool):
        frozen_mask = [frozen_mask] * len(params)
    if len(frozen_mask) != len(params):
        raise ShapeError("frozen_mask needs one flag per layer")
    new_layers = []
    for k, (layer, (dW, db), frozen) in enumerate(zip(params.layers, grads.layers, frozen_mask)):
        if frozen:
            new_layers.append(layer)
            continue
        if dW.shape != layer.W.shape or db.shape != layer.b.shape:
            raise ShapeError(f"layer {k}: gradient shape mismatch")
        if momentum and velocity is not None:
            vW, vb = velocity.layers[k]
            vW *= momentum
            vW += dW
            vb *= momentum
            vb += db
            dW, db = vW, vb
        new_layers.append(Layer(layer.W - lr * dW, layer.b - lr * db, layer.activation))
    return ParamSet(new_layers)
