"""Synthetic shifted domains, label-shift subsampling and CSV I/O."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from pdsfda.errors import ConfigError, ParseError, ValidationError
from pdsfda.seeding import stream


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    C: int
    domain_tag: str = ""

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim != 2 or self.y.shape != (self.X.shape[0],):
            raise ValidationError(f"X {self.X.shape} and y {self.y.shape} disagree")
        if not np.isfinite(self.X).all():
            raise ValidationError("features must be finite")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.C):
            raise ValidationError(f"labels must lie in [0, {self.C})")

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.C)

    def class_proportions(self) -> np.ndarray:
        counts = self.class_counts()
        return counts / counts.sum()


@dataclass
class Transform:
    """Feature-space shift applied to the target domain.

    ``rotation`` turns the first two coordinates by ``angle`` degrees,
    ``affine`` maps x -> A x + b, ``noise`` adds isotropic Gaussian noise.
    """

    kind: str = "identity"
    angle: float = 0.0
    A: list | None = None
    b: list | None = None
    sigma: float = 0.0

    def apply(self, X: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "identity":
            return X.copy()
        if self.kind == "rotation":
            t = math.radians(self.angle)
            R = np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])
            out = X.copy()
            out[:, :2] = X[:, :2] @ R.T
            return out
        if self.kind == "affine":
            A = np.asarray(self.A, dtype=np.float64)
            b = np.zeros(X.shape[1]) if self.b is None else np.asarray(self.b, dtype=np.float64)
            return X @ A.T + b
        if self.kind == "noise":
            return X + rng.normal(0.0, self.sigma, size=X.shape)
        raise ConfigError(f"unknown transform {self.kind!r}")

    def validate(self, d: int):
        if self.kind == "rotation" and d < 2:
            raise ConfigError("rotation needs at least two features")
        if self.kind == "affine":
            if self.A is None:
                raise ConfigError("affine transform needs A")
            A = np.asarray(self.A, dtype=np.float64)
            if A.shape != (d, d):
                raise ConfigError(f"affine A must be {d}x{d}")
            if abs(np.linalg.det(A)) < 1e-12:
                raise ConfigError("affine A is singular")
            if self.b is not None and np.shape(self.b) != (d,):
                raise ConfigError(f"affine b must have length {d}")
        if self.kind == "noise" and self.sigma < 0:
            raise ConfigError("noise sigma must be >= 0")
        if self.kind not in ("identity", "rotation", "affine", "noise"):
            raise ConfigError(f"unknown transform {self.kind!r}")


@dataclass
class GeneratorSpec:
    """Class-conditional Gaussian mixture in the plane plus noise dimensions.

    Class ``c`` owns ``components_per_class`` clusters placed along the ray at
    angle ``2*pi*c/C``, at radii ``radius + k*radius_step``. Coordinates beyond
    the first two are pure ``N(0, noise_std)`` nuisance features.
    """

    n: int = 600
    d: int = 2
    C: int = 3
    components_per_class: int = 2
    radius: float = 3.0
    radius_step: float = 2.0
    cluster_std: float = 0.5
    noise_std: float = 1.0
    transform: Transform = field(default_factory=Transform)
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorSpec":
        d = dict(d)
        t = d.pop("transform", None) or {}
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown generator fields {sorted(unknown)}")
        return cls(transform=Transform(**t), **d)


def _component_means(spec: GeneratorSpec) -> np.ndarray:
    means = np.zeros((spec.C, spec.components_per_class, 2))
    for c in range(spec.C):
        a = 2 * math.pi * c / spec.C
        for k in range(spec.components_per_class):
            r = spec.radius + k * spec.radius_step
            means[c, k] = (r * math.cos(a), r * math.sin(a))
    return means


def sample_mixture(spec: GeneratorSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Balanced draw: ``n // C`` points per class, components picked uniformly."""
    per_class = spec.n // spec.C
    means = _component_means(spec)
    y = np.repeat(np.arange(spec.C), per_class)
    comp = rng.integers(0, spec.components_per_class, size=y.size)
    X = np.empty((y.size, spec.d))
    X[:, :2] = means[y, comp] + rng.normal(0.0, spec.cluster_std, size=(y.size, 2))
    if spec.d > 2:
        X[:, 2:] = rng.normal(0.0, spec.noise_std, size=(y.size, spec.d - 2))
    order = rng.permutation(y.size)
    return X[order], y[order]


def make_shifted_pair(spec: GeneratorSpec) -> tuple[Dataset, Dataset]:
    if spec.C < 2 or spec.d < 2:
        raise ConfigError("need C >= 2 and d >= 2")
    if spec.n < 10 * spec.C:
        raise ConfigError(f"n={spec.n} too small for {spec.C} classes (need >= {10 * spec.C})")
    spec.transform.validate(spec.d)
    Xs, ys = sample_mixture(spec, stream(spec.seed, "data.source"))
    Xt, yt = sample_mixture(spec, stream(spec.seed, "data.target"))
    Xt = spec.transform.apply(Xt, stream(spec.seed, "data.transform"))
    return Dataset(Xs, ys, spec.C, "source"), Dataset(Xt, yt, spec.C, "target")


# ---------------------------------------------------------------------------
# label distribution shift
# ---------------------------------------------------------------------------

@dataclass
class ShiftSpec:
    kind: str = "none"  # tweak_one | minority_class | none
    p: float = 1.0
    k: int = 1
    seed: int = 0

    def validate(self, C: int):
        if self.kind not in ("none", "tweak_one", "minority_class"):
            raise ConfigError(f"unknown label shift {self.kind!r}")
        if not 0.0 < self.p <= 1.0:
            raise ConfigError(f"retention fraction p={self.p} outside (0, 1]")
        if self.kind == "tweak_one" and self.k != 1:
            raise ConfigError("tweak_one shifts exactly one class")
        if self.kind == "minority_class" and not 1 <= self.k < C:
            raise ConfigError(f"minority_class needs 1 <= k < C, got k={self.k}")


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def affected_classes(spec: ShiftSpec, C: int) -> np.ndarray:
    """Classes subsampled by ``spec``; fixed per seed."""
    if spec.kind == "none":
        return np.array([], dtype=np.int64)
    rng = stream(spec.seed, "label_shift.classes")
    return np.sort(rng.choice(C, size=spec.k, replace=False))


def apply_label_shift(data: Dataset, spec: ShiftSpec) -> Dataset:
    """Keep ``round(p * count)`` samples of each affected class."""
    spec.validate(data.C)
    chosen = affected_classes(spec, data.C)
    rng = stream(spec.seed, "label_shift.keep")
    keep = []
    for c in range(data.C):
        idx = np.flatnonzero(data.y == c)
        if c in chosen:
            idx = np.sort(rng.choice(idx, size=round_half_up(spec.p * idx.size), replace=False))
        keep.append(idx)
    keep = np.concatenate(keep)
    keep = keep[rng.permutation(keep.size)]
    return Dataset(data.X[keep], data.y[keep], data.C, data.domain_tag)


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------

def save_csv(data: Dataset, path) -> None:
    path = Path(path)
    header = [f"f{j}" for j in range(data.d)] + ["label"]
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row, label in zip(data.X, data.y):
            w.writerow(["%.17g" % v for v in row] + [int(label)])


def load_csv(path, C: int | None = None, domain_tag: str | None = None) -> Dataset:
    """Read a ``f0,...,f{d-1},label`` file. ``C`` defaults to ``max(label) + 1``."""
    path = Path(path)
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if "label" not in header:
            raise ParseError(f"{path}: missing required column 'label'")
        li = header.index("label")
        feat_cols = [j for j in range(len(header)) if j != li]
        X, y = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                feats = [float(row[j]) for j in feat_cols]
                label = int(row[li])
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
            if not all(math.isfinite(v) for v in feats):
                raise ParseError(f"{path}:{lineno}: non-finite feature")
            if label < 0:
                raise ParseError(f"{path}:{lineno}: negative label")
            if C is not None and label >= C:
                raise ValidationError(f"{path}:{lineno}: label {label} >= C={C}")
            X.append(feats)
            y.append(label)
    X = np.asarray(X, dtype=np.float64).reshape(len(y), len(feat_cols))
    y = np.asarray(y, dtype=np.int64)
    if C is None:
        C = int(y.max()) + 1 if y.size else 1
    return Dataset(X, y, C, domain_tag if domain_tag is not None else path.stem)


def concat(parts: Sequence[Dataset], domain_tag: str = "") -> Dataset:
    return Dataset(np.vstack([p.X for p in parts]), np.concatenate([p.y for p in parts]),
                   max(p.C for p in parts), domain_tag)
