"""Experiment configuration: YAML in, validated dataclasses out.

A config file looks like::

    name: rot45
    data:
      generator: {n: 600, d: 2, C: 3, cluster_std: 0.9,
                  transform: {kind: rotation, angle: 45}}
      label_shift: {kind: none}
      seed: null          # fixed data seed; null means "use the run seed"
    ensemble:
      topology: DBA
      archs:
        - {feature_widths: [32], bottleneck: 8}
        - {feature_widths: [32, 24], bottleneck: 8}
        - {feature_widths: [32], bottleneck: 8}
    source_training: {epochs: 30, lr: 0.05, batch_size: 32}
    adaptation: {alpha: 1.0, beta: 0.5, lr: 0.05, iterations: 300, anchor_strategy: whp}
    weak_injection: {enabled: false, member: 1}
    seeds: [0, 1, 2]
    output: results/rot45

Instead of ``generator`` the data section may name ``source_csv`` and
``target_csv`` files (paths relative to the config file). ``classifier_widths``
defaults to ``[C]``.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from pdsfda.adapt import AdaptationConfig
from pdsfda.datagen import GeneratorSpec, ShiftSpec, Transform
from pdsfda.ensemble import TOPOLOGIES, ArchSpec
from pdsfda.errors import ConfigError

OUTPUT_ENV = "PDSFDA_OUT"


@dataclass
class DataConfig:
    generator: GeneratorSpec | None = None
    source_csv: str | None = None
    target_csv: str | None = None
    n_classes: int | None = None
    label_shift: ShiftSpec = field(default_factory=ShiftSpec)
    seed: int | None = None

    @property
    def C(self) -> int:
        return self.generator.C if self.generator is not None else self.n_classes


@dataclass
class SourceTraining:
    epochs: int = 30
    lr: float = 0.05
    batch_size: int = 32


@dataclass
class WeakInjection:
    enabled: bool = False
    member: int = 1


@dataclass
class ExperimentConfig:
    name: str
    data: DataConfig
    topology: str
    archs: list[ArchSpec]
    source_training: SourceTraining
    adaptation: AdaptationConfig
    weak_injection: WeakInjection
    seeds: list[int]
    output: str | None = None
    domains: dict | None = None
    base_dir: str = "."

    def canonical(self) -> dict:
        """Fields that determine results; seeds, output and strategy excluded."""
        d = {
            "data": _plain(asdict(self.data)),
            "topology": self.topology,
            "archs": [a.to_dict() for a in self.archs],
            "source_training": asdict(self.source_training),
            "adaptation": {k: v for k, v in asdict(self.adaptation).items()
                           if k not in ("anchor_strategy", "seed", "log_interval")},
            "weak_injection": asdict(self.weak_injection),
        }
        if self.domains is not None:
            d["domains"] = _plain(self.domains)
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def output_dir(self, override: str | None = None) -> Path:
        if override:
            return Path(override)
        root = os.environ.get(OUTPUT_ENV)
        if self.output:
            out = Path(self.output)
            if out.is_absolute():
                return out
            return Path(root) / out if root else Path(self.base_dir) / out
        return Path(root or "results") / self.name

    def with_adaptation(self, **changes) -> "ExperimentConfig":
        new = copy.deepcopy(self)
        for k, v in changes.items():
            setattr(new.adaptation, k, v)
        return new


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _section(raw: dict, key: str, cls):
    d = raw.get(key) or {}
    unknown = set(d) - set(cls.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"{key}: unknown fields {sorted(unknown)}")
    try:
        return cls(**d)
    except TypeError as exc:
        raise ConfigError(f"{key}: {exc}") from None


def from_dict(raw: dict, base_dir: str | Path = ".") -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    known = {"name", "data", "ensemble", "source_training", "adaptation", "weak_injection",
             "seeds", "output", "domains"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown top-level fields {sorted(unknown)}")
    base_dir = Path(base_dir)

    draw = dict(raw.get("data") or {})
    gen = draw.pop("generator", None)
    shift = draw.pop("label_shift", None) or {}
    unknown = set(draw) - {"source_csv", "target_csv", "n_classes", "seed"}
    if unknown:
        raise ConfigError(f"data: unknown fields {sorted(unknown)}")
    try:
        data = DataConfig(generator=GeneratorSpec.from_dict(gen) if gen is not None else None,
                          label_shift=ShiftSpec(**shift), **draw)
    except TypeError as exc:
        raise ConfigError(f"data: {exc}") from None
    if data.generator is None:
        if not (data.source_csv and data.target_csv):
            raise ConfigError("data needs a generator or both source_csv and target_csv")
        if data.n_classes is None:
            raise ConfigError("data.n_classes is required with CSV input")
        for key in ("source_csv", "target_csv"):
            p = Path(getattr(data, key))
            p = p if p.is_absolute() else base_dir / p
            if not p.exists():
                raise ConfigError(f"data.{key}: {p} does not exist")
            setattr(data, key, str(p))
    C = data.C
    data.label_shift.validate(C)

    ens = raw.get("ensemble") or {}
    topology = ens.get("topology", "DBA")
    if topology not in TOPOLOGIES:
        raise ConfigError(f"ensemble.topology must be one of {TOPOLOGIES}")
    arch_raw = ens.get("archs")
    if not arch_raw:
        raise ConfigError("ensemble.archs must list at least one architecture")
    archs = []
    for a in arch_raw:
        a = dict(a)
        a.setdefault("classifier_widths", [C])
        if "bottleneck" not in a:
            raise ConfigError("every architecture needs a bottleneck width")
        arch = ArchSpec.from_dict(a)
        if arch.n_classes != C:
            raise ConfigError(f"classifier output width {arch.n_classes} != C={C}")
        archs.append(arch)
    distinct = len(set(archs))
    if topology == "DBA" and distinct < 2:
        raise ConfigError("DBA needs at least two distinct architectures")
    if topology in ("ShB", "SeB") and distinct != 1:
        raise ConfigError(f"{topology} needs identical architectures")

    adaptation = AdaptationConfig.from_dict(raw.get("adaptation") or {})
    weak = _section(raw, "weak_injection", WeakInjection)
    if weak.enabled and not 0 <= weak.member < len(archs):
        raise ConfigError("weak_injection.member out of range")
    if adaptation.anchor_strategy == "fixed" and adaptation.anchor_index is None and weak.enabled:
        adaptation.anchor_index = weak.member

    probe = copy.deepcopy(adaptation)
    if probe.proportion_mode == "true" and probe.true_proportions is None:
        probe.true_proportions = [1.0 / C] * C  # filled from target labels at run time
    probe.validate(len(archs), C)

    seeds = raw.get("seeds")
    if not seeds or not isinstance(seeds, list):
        raise ConfigError("seeds must be a non-empty list")
    seeds = [int(s) for s in seeds]
    if len(set(seeds)) != len(seeds):
        raise ConfigError("seeds must be distinct")

    domains = raw.get("domains")
    if domains is not None:
        if not isinstance(domains, dict) or len(domains) < 2:
            raise ConfigError("domains must map at least two names to transforms")
        if data.generator is None:
            raise ConfigError("domains require a generator data section")
        for name, t in domains.items():
            Transform(**t).validate(data.generator.d)

    return ExperimentConfig(
        name=str(raw.get("name", "experiment")), data=data, topology=topology, archs=archs,
        source_training=_section(raw, "source_training", SourceTraining),
        adaptation=adaptation, weak_injection=weak, seeds=seeds, output=raw.get("output"),
        domains=domains, base_dir=str(base_dir),
    )


def load(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return from_dict(raw, path.parent)
