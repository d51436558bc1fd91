"""Shared test fixtures: random probability rows, finite differences, small nets."""

import numpy as np

from pdsfda import diffcore

FD_STEP = 1e-5
# Relative error is |analytic - numeric| / max(|analytic|, |numeric|, FD_FLOOR).
# Components smaller than the floor are judged on absolute error instead, since
# central differences there are dominated by float64 cancellation.
FD_FLOOR = 1e-6
KINK_MARGIN = 1e-3


def random_rows(rng, n, C, sharp=1.0):
    logits = rng.normal(0.0, sharp, size=(n, C))
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def small_instance(rng, d=3, hidden=(5,), C=3, n=6):
    """Random ReLU net and batch whose pre-activations stay away from the kink."""
    while True:
        widths = [d, *hidden, C]
        acts = ["relu"] * len(hidden) + ["identity"]
        params = diffcore.init_params(widths, rng, acts)
        for layer in params.layers:
            layer.b[:] = rng.normal(0.0, 0.3, size=layer.b.shape)
        X = rng.normal(size=(n, d))
        _, _, pre = diffcore._forward_cache(params, X)
        if all(np.abs(z).min() > KINK_MARGIN for z, l in zip(pre, params.layers) if l.activation == "relu"):
            return params, X


def numeric_gradient(params, X, loss_kind, **args):
    flat = []
    for layer in params.layers:
        for arr in (layer.W, layer.b):
            g = np.zeros_like(arr)
            it = np.nditer(arr, flags=["multi_index"])
            for _ in it:
                i = it.multi_index
                old = arr[i]
                arr[i] = old + FD_STEP
                up = diffcore.prob_loss(diffcore.softmax(diffcore.forward(params, X)), loss_kind, **args)[0]
                arr[i] = old - FD_STEP
                down = diffcore.prob_loss(diffcore.softmax(diffcore.forward(params, X)), loss_kind, **args)[0]
                arr[i] = old
                g[i] = (up - down) / (2 * FD_STEP)
            flat.append(g.ravel())
    return np.concatenate(flat)


def max_relative_error(analytic, numeric):
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), FD_FLOOR)
    return float(np.max(np.abs(analytic - numeric) / scale))


def loss_args(kind, rng, n, C):
    W = rng.dirichlet(np.ones(C))
    anchor = random_rows(rng, n, C)
    if kind == "cross_entropy_hard":
        return {"targets": rng.integers(0, C, size=n)}
    if kind == "weighted_mi":
        return {"weights": W}
    if kind == "hd_to_anchor":
        return {"anchor": anchor}
    return {"alpha": float(rng.uniform(0.2, 2.0)), "beta": float(rng.uniform(0.2, 2.0)),
            "weights": W, "anchor": anchor}
