"""Ensembles of extractor/classifier hypotheses and their source training.

Three topologies are supported:

* ``ShB``  one extractor object shared by every classifier head
* ``SeB``  one extractor per head, all with the same architecture
* ``DBA``  one extractor per head, with at least two distinct architectures
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from pdsfda import diffcore
from pdsfda.datagen import Dataset
from pdsfda.diffcore import GradientSet, Layer, ParamSet
from pdsfda.errors import ConfigError, NumericError, ParseError, ShapeError
from pdsfda.seeding import stream

TOPOLOGIES = ("ShB", "SeB", "DBA")
SNAPSHOT_FORMAT = "pdsfda-ensemble"
SNAPSHOT_VERSION = 1


@dataclass(frozen=True)
class ArchSpec:
    feature_widths: tuple[int, ...]
    bottleneck: int
    classifier_widths: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "feature_widths", tuple(int(w) for w in self.feature_widths))
        object.__setattr__(self, "classifier_widths", tuple(int(w) for w in self.classifier_widths))
        widths = (*self.feature_widths, self.bottleneck, *self.classifier_widths)
        if not self.classifier_widths or any(w < 1 for w in widths):
            raise ConfigError(f"invalid architecture {self}")

    @property
    def n_classes(self) -> int:
        return self.classifier_widths[-1]

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        return cls(tuple(d.get("feature_widths", ())), int(d["bottleneck"]),
                   tuple(d["classifier_widths"]))

    def to_dict(self) -> dict:
        return {"feature_widths": list(self.feature_widths), "bottleneck": self.bottleneck,
                "classifier_widths": list(self.classifier_widths)}


@dataclass
class Hypothesis:
    extractor: ParamSet
    classifier: ParamSet
    arch: ArchSpec

    def __post_init__(self):
        if self.extractor.out_dim != self.classifier.in_dim:
            raise ShapeError("extractor output and classifier input dimensions differ")

    def network(self) -> ParamSet:
        return diffcore.chain(self.extractor, self.classifier)

    def features(self, X) -> np.ndarray:
        return diffcore.forward(self.extractor, X)

    def predict_proba(self, X) -> np.ndarray:
        return diffcore.softmax(diffcore.forward(self.network(), X))


@dataclass
class Ensemble:
    hypotheses: list[Hypothesis]
    topology: str
    anchor_index: int | None = None
    history: dict = field(default_factory=dict)

    @property
    def M(self) -> int:
        return len(self.hypotheses)

    @property
    def n_classes(self) -> int:
        return self.hypotheses[0].classifier.out_dim

    @property
    def in_dim(self) -> int:
        return self.hypotheses[0].extractor.in_dim

    def copy(self) -> "Ensemble":
        """Deep copy that keeps extractor sharing intact."""
        memo: dict[int, ParamSet] = {}
        hyps = []
        for h in self.hypotheses:
            key = id(h.extractor)
            if key not in memo:
                memo[key] = h.extractor.copy()
            hyps.append(Hypothesis(memo[key], h.classifier.copy(), h.arch))
        return Ensemble(hyps, self.topology, self.anchor_index, json.loads(json.dumps(self.history)))


def _extractor_widths(arch: ArchSpec, in_dim: int) -> list[int]:
    return [in_dim, *arch.feature_widths, arch.bottleneck]


def _init_classifier(arch: ArchSpec, rng) -> ParamSet:
    widths = [arch.bottleneck, *arch.classifier_widths]
    acts = ["relu"] * (len(widths) - 2) + ["identity"]
    return diffcore.init_params(widths, rng, acts)


def build_ensemble(topology: str, arch_specs: Sequence[ArchSpec], in_dim: int, seed: int,
                   anchor_index: int | None = None) -> Ensemble:
    """Randomly initialised ensemble.

    Extractor ``i`` and classifier ``i`` draw from their own named streams, so
    for a fixed seed ShB and SeB differ only in whether the extractor of
    hypothesis 0 is shared.
    """
    if topology not in TOPOLOGIES:
        raise ConfigError(f"unknown topology {topology!r}")
    specs = list(arch_specs)
    if not specs:
        raise ConfigError("ensemble needs at least one hypothesis")
    if len({s.n_classes for s in specs}) != 1:
        raise ConfigError("all hypotheses must predict the same number of classes")
    distinct = len(set(specs))
    if topology in ("ShB", "SeB") and distinct != 1:
        raise ConfigError(f"{topology} requires identical architectures")
    if topology == "DBA" and distinct < 2:
        raise ConfigError("DBA requires at least two distinct architectures")
    if anchor_index is not None and not 0 <= anchor_index < len(specs):
        raise ConfigError(f"anchor_index {anchor_index} out of range")

    hyps = []
    shared = None
    for i, arch in enumerate(specs):
        if topology == "ShB" and shared is not None:
            extractor = shared
        else:
            extractor = diffcore.init_params(_extractor_widths(arch, in_dim),
                                             stream(seed, "init.extractor", i))
            shared = extractor
        classifier = _init_classifier(arch, stream(seed, "init.classifier", i))
        hyps.append(Hypothesis(extractor, classifier, arch))
    return Ensemble(hyps, topology, anchor_index)


def _check_input(ens: Ensemble, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != ens.in_dim:
        raise ShapeError(f"input of shape {X.shape} for extractors expecting {ens.in_dim} features")
    return X


def predict(ens: Ensemble, X) -> tuple[np.ndarray, np.ndarray]:
    """Per-hypothesis softmax rows ``(M, N, C)`` and their uniform average."""
    X = _check_input(ens, X)
    P = np.stack([h.predict_proba(X) for h in ens.hypotheses])
    return P, P.mean(axis=0)


def predict_labels(ens: Ensemble, X) -> np.ndarray:
    return np.argmax(predict(ens, X)[1], axis=1)


def apply_gradients(ens: Ensemble, grads: Sequence[GradientSet], lr: float,
                    freeze_classifiers: bool = False) -> None:
    """SGD update with one gradient per hypothesis over its chained network.

    Gradients of a shared extractor are summed over the heads that use it and
    applied once; the new extractor object is re-shared afterwards.
    """
    extractor_grads: dict[int, GradientSet] = {}
    new_extractor: dict[int, ParamSet] = {}
    for h, g in zip(ens.hypotheses, grads):
        n_ext = len(h.extractor)
        ge = GradientSet(g.layers[:n_ext])
        key = id(h.extractor)
        extractor_grads[key] = extractor_grads[key] + ge if key in extractor_grads else ge
        gc = GradientSet(g.layers[n_ext:])
        h.classifier = diffcore.sgd_step(h.classifier, gc, lr, frozen_mask=freeze_classifiers)
    for h in ens.hypotheses:
        key = id(h.extractor)
        if key not in new_extractor:
            new_extractor[key] = diffcore.sgd_step(h.extractor, extractor_grads[key], lr)
    for h in ens.hypotheses:
        h.extractor = new_extractor[id(h.extractor)]


def _minibatches(n: int, batch_size: int, rng) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def train_source(ens: Ensemble, source: Dataset, epochs: int, lr: float, batch_size: int,
                 seed: int) -> Ensemble:
    """Minimise each hypothesis's own cross entropy on labelled source data.

    All hypotheses see the same minibatch sequence. Returns a trained copy;
    ``history['source']`` holds per-epoch mean losses and final accuracies.
    """
    if batch_size < 1 or batch_size > len(source):
        raise ConfigError(f"batch_size {batch_size} must be in [1, {len(source)}]")
    if source.C != ens.n_classes:
        raise ConfigError("source classes do not match classifier width")
    ens = ens.copy()
    X = _check_input(ens, source.X)
    rng = stream(seed, "batching.source")
    losses = []
    for epoch in range(epochs):
        totals = np.zeros(ens.M)
        for idx in _minibatches(len(source), batch_size, rng):
            grads = []
            for i, h in enumerate(ens.hypotheses):
                try:
                    loss, g = diffcore.backward(h.network(), X[idx], "cross_entropy_hard",
                                                targets=source.y[idx])
                except NumericError as exc:
                    raise NumericError(f"hypothesis {i} diverged in epoch {epoch}: {exc}") from None
                totals[i] += loss * idx.size
                grads.append(g)
            apply_gradients(ens, grads, lr)
        losses.append((totals / len(source)).tolist())
    P, _ = predict(ens, X)
    acc = (P.argmax(axis=2) == source.y).mean(axis=1)
    ens.history["source"] = {"epoch_loss": losses, "train_accuracy": acc.tolist()}
    return ens


def permute_classifier(ens: Ensemble, member: int, permutation: Sequence[int] | None = None) -> Ensemble:
    """Copy of ``ens`` whose ``member`` head has its output classes permuted.

    The default cyclic shift leaves no class in place, giving a confidently
    wrong hypothesis.
    """
    if not 0 <= member < ens.M:
        raise ConfigError(f"member {member} out of range")
    out = ens.copy()
    C = out.n_classes
    perm = np.roll(np.arange(C), 1) if permutation is None else np.asarray(permutation)
    if sorted(perm.tolist()) != list(range(C)):
        raise ConfigError("not a permutation of the classes")
    h = out.hypotheses[member]
    last = h.classifier.layers[-1]
    h.classifier = ParamSet(h.classifier.layers[:-1]
                            + [Layer(last.W[:, perm].copy(), last.b[perm].copy(), last.activation)])
    return out


# ---------------------------------------------------------------------------
# snapshots
# ---------------------------------------------------------------------------

def _params_to_json(p: ParamSet) -> list:
    return [{"W": l.W.tolist(), "b": l.b.tolist(), "activation": l.activation} for l in p.layers]


def _params_from_json(d: list) -> ParamSet:
    return ParamSet([Layer(np.array(l["W"], dtype=np.float64).reshape(len(l["W"]), -1),
                           np.array(l["b"], dtype=np.float64), l["activation"]) for l in d])


def save_snapshot(ens: Ensemble, path) -> None:
    """JSON snapshot; Python's float repr round-trips every float64 exactly."""
    ext_ids: list[int] = []
    extractors = []
    for h in ens.hypotheses:
        if id(h.extractor) not in ext_ids:
            ext_ids.append(id(h.extractor))
            extractors.append(_params_to_json(h.extractor))
    doc = {
        "format": SNAPSHOT_FORMAT,
        "version": SNAPSHOT_VERSION,
        "topology": ens.topology,
        "anchor_index": ens.anchor_index,
        "extractors": extractors,
        "hypotheses": [{"arch": h.arch.to_dict(), "extractor": ext_ids.index(id(h.extractor)),
                        "classifier": _params_to_json(h.classifier)} for h in ens.hypotheses],
    }
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


def load_snapshot(path) -> Ensemble:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from None
    if doc.get("format") != SNAPSHOT_FORMAT:
        raise ParseError(f"{path}: not an ensemble snapshot")
    if doc.get("version") != SNAPSHOT_VERSION:
        raise ParseError(f"{path}: unsupported snapshot version {doc.get('version')}")
    extractors = [_params_from_json(e) for e in doc["extractors"]]
    hyps = [Hypothesis(extractors[h["extractor"]], _params_from_json(h["classifier"]),
                       ArchSpec.from_dict(h["arch"])) for h in doc["hypotheses"]]
    return Ensemble(hyps, doc["topology"], doc.get("anchor_index"))
