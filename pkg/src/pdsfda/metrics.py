"""Accuracy, function-space disagreement, calibration and the two-proportion CI test."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from pdsfda.errors import ValidationError


def accuracy(probs, labels) -> float:
    return float(np.mean(np.argmax(probs, axis=1) == np.asarray(labels)))


def per_class_accuracy(probs, labels, C: int | None = None) -> np.ndarray:
    labels = np.asarray(labels)
    C = np.shape(probs)[1] if C is None else C
    pred = np.argmax(probs, axis=1)
    out = np.full(C, np.nan)
    for c in range(C):
        mask = labels == c
        if mask.any():
            out[c] = np.mean(pred[mask] == c)
    return out


def disagreement(preds, normalized: bool = False) -> float:
    """Ordered-pair count of argmax disagreements, divided by N.

    With ``normalized=True`` the result is further divided by ``M(M-1)`` and
    lies in [0, 1].
    """
    P = np.asarray(preds)
    M, N = P.shape[0], P.shape[1]
    if M < 2:
        raise ValidationError("disagreement needs at least two hypotheses")
    L = np.argmax(P, axis=2)
    pair = (L[:, None, :] != L[None, :, :]).sum()
    raw = pair / N
    return float(raw / (M * (M - 1)) if normalized else raw)


def brier(probs, labels) -> float:
    """Mean over samples of the squared distance to the one-hot label (range [0, 2])."""
    P = np.asarray(probs, dtype=np.float64)
    onehot = np.eye(P.shape[1])[np.asarray(labels)]
    return float(np.mean(np.sum((P - onehot) ** 2, axis=1)))


def reliability_bins(probs, labels, bins: int = 10) -> list[dict]:
    """Equal-width bins over max-probability: ``[k/B, (k+1)/B)``, the last one closed."""
    if bins < 1:
        raise ValidationError("bins must be >= 1")
    P = np.asarray(probs, dtype=np.float64)
    conf = P.max(axis=1)
    correct = np.argmax(P, axis=1) == np.asarray(labels)
    idx = np.minimum((conf * bins).astype(np.int64), bins - 1)
    out = []
    for b in range(bins):
        mask = idx == b
        n = int(mask.sum())
        out.append({"lo": b / bins, "hi": (b + 1) / bins, "count": n,
                    "accuracy": float(correct[mask].mean()) if n else 0.0,
                    "confidence": float(conf[mask].mean()) if n else 0.0})
    return out


def ece(probs, labels, bins: int = 10) -> float:
    N = np.shape(probs)[0]
    return float(sum(b["count"] / N * abs(b["accuracy"] - b["confidence"])
                     for b in reliability_bins(probs, labels, bins) if b["count"]))


@dataclass
class EvalReport:
    accuracy: float
    brier: float
    ece: float
    disagreement: float
    per_class_accuracy: list

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def evaluate(preds, labels, bins: int = 10) -> EvalReport:
    """Report for a ``(M, N, C)`` prediction tensor fused by uniform averaging."""
    P = np.asarray(preds, dtype=np.float64)
    avg = P.mean(axis=0)
    dis = disagreement(P) if P.shape[0] > 1 else 0.0
    pca = per_class_accuracy(avg, labels)
    return EvalReport(accuracy(avg, labels), brier(avg, labels), ece(avg, labels, bins), dis,
                      [None if math.isnan(v) else float(v) for v in pca])


@dataclass
class CIResult:
    p_diff: float
    se_diff: float
    interval: tuple
    overlaps_zero: bool


def ci_difference(acc1: float, n1: int, acc2: float, n2: int, z: float = 1.0) -> CIResult:
    """Interval ``(acc1 - acc2) +/- z * sqrt(SE1^2 + SE2^2)`` with binomial SEs."""
    if n1 < 1 or n2 < 1:
        raise ValidationError("sample counts must be >= 1")
    for a in (acc1, acc2):
        if not 0.0 <= a <= 1.0:
            raise ValidationError(f"accuracy {a} outside [0, 1]")
    se1 = acc1 * (1 - acc1) / n1
    se2 = acc2 * (1 - acc2) / n2
    diff = acc1 - acc2
    se = math.sqrt(se1 + se2)
    lo, hi = diff - z * se, diff + z * se
    return CIResult(diff, se, (lo, hi), lo <= 0.0 <= hi)


CI_COLUMNS = ["source", "run", "target", "p_diff", "se_diff", "lo", "hi", "overlaps_zero"]


def write_ci_table(rows: Iterable[dict], path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, CI_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("%.17g" % r[k]) if isinstance(r[k], float) else r[k] for k in CI_COLUMNS})
