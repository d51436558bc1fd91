"""Source-free target adaptation with a weak-hypothesis-penalising anchor.

The target objective, minimised over extractor parameters only, is::

    L = alpha * mean_i[-I_W(h_i)] + beta * HD(members, anchor)

``I_W`` is mutual information whose label-marginal entropy is weighted per class
by an estimated target class proportion ``W``. ``HD`` is the mean cross entropy
of member rows against anchor rows. The anchor is one of:

* ``whp``       members mixed by softmax of their mean cosine agreement
* ``ensemble``  uniform mix of members
* ``fixed``     a configured member
* ``random``    a member drawn once per run

Anchor rows and anchor weights are treated as constants in the gradient.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from pdsfda import diffcore
from pdsfda.diffcore import clamp
from pdsfda.ensemble import Ensemble, _check_input, apply_gradients
from pdsfda.errors import ConfigError, NumericError, ShapeError, ValidationError
from pdsfda.seeding import stream

STRATEGIES = ("fixed", "random", "ensemble", "whp")
PROPORTION_MODES = ("uniform", "pseudo", "true")
PROPORTION_FLOOR = 1e-6


def entropy(p, axis=-1) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return -np.sum(p * np.log(clamp(p)), axis=axis)


def mutual_information(preds) -> float:
    """``H(mean row) - mean H(row)`` in nats."""
    P = np.asarray(preds, dtype=np.float64)
    return float(entropy(P.mean(axis=0)) - entropy(P).mean())


def _check_proportions(W, C: int) -> np.ndarray:
    W = np.asarray(W, dtype=np.float64)
    if W.shape != (C,):
        raise ValidationError(f"class proportions of length {W.size} for {C} classes")
    if (W < 0).any() or abs(W.sum() - 1.0) > 1e-9:
        raise ValidationError("class proportions must be non-negative and sum to 1")
    return W


def weighted_mutual_information(preds, W) -> float:
    """``-sum_c W_c m_c log m_c - mean H(row)`` with ``m`` the mean row."""
    P = np.asarray(preds, dtype=np.float64)
    W = _check_proportions(W, P.shape[1])
    m = P.mean(axis=0)
    return float(-np.sum(W * m * np.log(clamp(m))) - entropy(P).mean())


@dataclass
class AnchorWeights:
    raw: np.ndarray
    normalized: np.ndarray


@dataclass
class ClassProportion:
    W: np.ndarray
    source: str = "pseudo"


def _cosine_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.sum(a * b, axis=-1) / (np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1))


def anchor_weights(preds, mode: str = "per_sample") -> AnchorWeights:
    """Mean cosine agreement of each member with the others, softmax-normalised.

    ``per_sample`` averages row-wise cosines over samples; ``flattened`` takes
    one cosine between the members' whole prediction matrices.
    """
    P = np.asarray(preds, dtype=np.float64)
    M = P.shape[0]
    if M < 2:
        raise ConfigError("anchor weights need at least two hypotheses")
    sim = np.ones((M, M))
    for i in range(M):
        for j in range(i + 1, M):
            if mode == "per_sample":
                s = _cosine_rows(P[i], P[j]).mean()
            elif mode == "flattened":
                s = _cosine_rows(P[i].ravel(), P[j].ravel())
            else:
                raise ConfigError(f"unknown cosine mode {mode!r}")
            sim[i, j] = sim[j, i] = s
    raw = (sim.sum(axis=1) - 1.0) / (M - 1)
    return AnchorWeights(raw, diffcore.softmax(raw))


def anchor_mixture(M: int, strategy: str, weights: AnchorWeights | None = None,
                   anchor_index: int | None = None) -> np.ndarray:
    """Mixing coefficients over members that define the anchor."""
    if strategy == "whp":
        if weights is None:
            raise ConfigError("whp anchor needs anchor weights")
        return np.asarray(weights.normalized, dtype=np.float64)
    if strategy == "ensemble":
        return np.full(M, 1.0 / M)
    if strategy in ("fixed", "random"):
        if anchor_index is None or not 0 <= anchor_index < M:
            raise ConfigError(f"{strategy} anchor needs a valid anchor_index, got {anchor_index}")
        mix = np.zeros(M)
        mix[anchor_index] = 1.0
        return mix
    raise ConfigError(f"unknown anchor strategy {strategy!r}")


def build_anchor(preds, strategy: str, weights: AnchorWeights | None = None,
                 anchor_index: int | None = None) -> np.ndarray:
    P = np.asarray(preds, dtype=np.float64)
    if strategy in ("fixed", "random"):
        anchor_mixture(P.shape[0], strategy, weights, anchor_index)
        return P[anchor_index].copy()
    mix = anchor_mixture(P.shape[0], strategy, weights, anchor_index)
    return np.tensordot(mix, P, axes=1)


def hd_members(M: int, strategy: str, anchor_index: int | None) -> list[int]:
    """Members that pay the disparity penalty; a fixed/random anchor sits out."""
    if strategy in ("fixed", "random"):
        return [i for i in range(M) if i != anchor_index]
    return list(range(M))


def hypothesis_disparity(preds, anchor, members: Sequence[int] | None = None) -> float:
    """Mean over members and samples of ``-sum_c anchor_c log p_c``."""
    P = np.asarray(preds, dtype=np.float64)
    A = np.asarray(anchor, dtype=np.float64)
    if A.shape != P.shape[1:]:
        raise ShapeError(f"anchor {A.shape} vs member rows {P.shape[1:]}")
    members = range(P.shape[0]) if members is None else list(members)
    if not len(members):
        return 0.0
    return float(np.mean([-np.sum(A * np.log(clamp(P[i])), axis=1).mean() for i in members]))


def pseudo_labels(avg_preds) -> tuple[np.ndarray, ClassProportion]:
    """Argmax labels and the class proportions they imply (empty classes floored)."""
    P = np.asarray(avg_preds, dtype=np.float64)
    labels = np.argmax(P, axis=1)
    counts = np.bincount(labels, minlength=P.shape[1]).astype(np.float64)
    W = counts / counts.sum()
    W = np.maximum(W, PROPORTION_FLOOR)
    return labels, ClassProportion(W / W.sum(), "pseudo")


@dataclass
class AdaptationConfig:
    alpha: float = 1.0
    beta: float = 0.5
    lr: float = 0.01
    iterations: int = 200
    batch_size: int = 64
    anchor_strategy: str = "whp"
    anchor_index: int | None = None
    proportion_mode: str = "uniform"
    proportion_refresh_interval: int | None = None  # default: one pass over the target
    true_proportions: list | None = None
    cosine_mode: str = "per_sample"
    marginal: str = "batch"  # batch | full
    log_interval: int = 10
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "AdaptationConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown adaptation fields {sorted(unknown)}")
        return cls(**d)

    def validate(self, M: int, C: int):
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("alpha and beta must be >= 0")
        if self.lr < 0 or self.iterations < 0 or self.batch_size < 1:
            raise ConfigError("lr and iterations must be >= 0, batch_size >= 1")
        if self.anchor_strategy not in STRATEGIES:
            raise ConfigError(f"anchor_strategy must be one of {STRATEGIES}")
        if self.anchor_strategy == "whp" and M < 3:
            raise ConfigError(f"whp anchor needs at least 3 hypotheses, got {M}")
        if self.anchor_strategy == "fixed" and (self.anchor_index is None
                                                 or not 0 <= self.anchor_index < M):
            raise ConfigError(f"fixed anchor needs anchor_index in [0, {M})")
        if self.proportion_mode not in PROPORTION_MODES:
            raise ConfigError(f"proportion_mode must be one of {PROPORTION_MODES}")
        if self.proportion_mode == "true":
            if self.true_proportions is None:
                raise ConfigError("proportion_mode=true needs true_proportions")
            _check_proportions(self.true_proportions, C)
        if self.cosine_mode not in ("per_sample", "flattened"):
            raise ConfigError(f"unknown cosine_mode {self.cosine_mode!r}")
        if self.marginal not in ("batch", "full"):
            raise ConfigError(f"unknown marginal mode {self.marginal!r}")
        if self.proportion_refresh_interval is not None and self.proportion_refresh_interval < 1:
            raise ConfigError("proportion_refresh_interval must be >= 1")
        if self.log_interval < 1:
            raise ConfigError("log_interval must be >= 1")


def _batch_indices(n: int, batch_size: int, rng):
    while True:
        order = rng.permutation(n)
        for i in range(0, n, batch_size):
            yield order[i:i + batch_size]


def adapt_target(ens: Ensemble, target_X, cfg: AdaptationConfig,
                 trace_labels=None) -> tuple[Ensemble, list[dict]]:
    """Adapt extractors to unlabelled target features; classifiers stay frozen.

    ``trace_labels`` are only used to log accuracies and never enter the
    objective. Returns the adapted copy and the list of trace records.
    """
    X = _check_input(ens, target_X)
    M, C, N = ens.M, ens.n_classes, X.shape[0]
    anchor_index = cfg.anchor_index
    if cfg.anchor_strategy == "random":
        anchor_index = int(stream(cfg.seed, "anchor.random").integers(M))
    cfg.validate(M, C)
    if trace_labels is not None:
        trace_labels = np.asarray(trace_labels)
        if trace_labels.shape != (N,):
            raise ShapeError("one tracing label per target row required")

    ens = ens.copy()
    bs = min(cfg.batch_size, N)
    refresh = cfg.proportion_refresh_interval or max(1, math.ceil(N / bs))
    members = hd_members(M, cfg.anchor_strategy, anchor_index)
    batches = _batch_indices(N, bs, stream(cfg.seed, "batching.target"))
    if cfg.proportion_mode == "uniform":
        W = np.full(C, 1.0 / C)
    elif cfg.proportion_mode == "true":
        W = np.asarray(cfg.true_proportions, dtype=np.float64)
    trace: list[dict] = []

    for step in range(cfg.iterations):
        if cfg.proportion_mode == "pseudo" and step % refresh == 0:
            W = pseudo_labels(_ensemble_proba(ens, X))[1].W
        idx = next(batches)
        xb = X[idx]
        nets = [h.network() for h in ens.hypotheses]
        P = np.stack([diffcore.softmax(diffcore.forward(net, xb)) for net in nets])

        weights = anchor_weights(P, cfg.cosine_mode) if M >= 2 else None
        if cfg.anchor_strategy == "whp":
            mix = anchor_mixture(M, "whp", weights)
        else:
            mix = anchor_mixture(M, cfg.anchor_strategy, anchor_index=anchor_index)
        anchor = np.tensordot(mix, P, axes=1)

        total, mi_sum, grads = 0.0, 0.0, []
        for i, net in enumerate(nets):
            extra = {}
            if cfg.marginal == "full":
                full = diffcore.softmax(diffcore.forward(net, X))
                extra = {"marginal_mass": full.sum(axis=0) - P[i].sum(axis=0),
                         "marginal_count": N - idx.size}
            b_i = cfg.beta / len(members) if i in members else 0.0
            try:
                loss, g = diffcore.backward(net, xb, "composite", alpha=cfg.alpha / M, beta=b_i,
                                            weights=W, anchor=anchor, **extra)
            except NumericError as exc:
                raise NumericError(f"hypothesis {i} at step {step}: {exc}") from None
            total += loss
            mi_sum += -diffcore.prob_loss(P[i], "weighted_mi", weights=W, **extra)[0]
            grads.append(g)
        if not np.isfinite(total):
            raise NumericError(f"non-finite adaptation loss at step {step}")
        apply_gradients(ens, grads, cfg.lr, freeze_classifiers=True)

        if step % cfg.log_interval == 0 or step == cfg.iterations - 1:
            rec = {"step": step, "loss": total, "mi": mi_sum / M,
                   "hd": hypothesis_disparity(P, anchor, members),
                   "anchor_weights": mix.tolist(), "class_proportions": W.tolist()}
            if trace_labels is not None:
                Pf = np.stack([h.predict_proba(X) for h in ens.hypotheses])
                rec["accuracy"] = (Pf.argmax(axis=2) == trace_labels).mean(axis=1).tolist()
                rec["ensemble_accuracy"] = float((Pf.mean(axis=0).argmax(axis=1) == trace_labels).mean())
            trace.append(rec)
    ens.history["adapt"] = {"anchor_index": anchor_index, "strategy": cfg.anchor_strategy}
    return ens, trace


def _ensemble_proba(ens: Ensemble, X: np.ndarray) -> np.ndarray:
    return np.mean([h.predict_proba(X) for h in ens.hypotheses], axis=0)


def write_trace(trace: list[dict], path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for rec in trace:
            fh.write(json.dumps(rec) + "\n")
