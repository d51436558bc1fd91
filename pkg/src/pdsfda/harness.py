"""Seeded experiment pipelines: single runs, anchor ablation, beta sweep, shift report.

Every seeded record is appended to ``runs.jsonl`` in the output directory.
Before computing a ``(config hash, seed, strategy)`` triple the file is scanned,
and triples already completed are reused, so an interrupted sweep resumes
where it stopped.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from filelock import FileLock

from pdsfda import adapt as adapt_mod
from pdsfda import metrics
from pdsfda.config import ExperimentConfig
from pdsfda.datagen import (Dataset, GeneratorSpec, Transform, apply_label_shift, load_csv,
                            make_shifted_pair, sample_mixture)
from pdsfda.ensemble import (Ensemble, build_ensemble, permute_classifier, predict,
                             save_snapshot, train_source)
from pdsfda.errors import ConfigError, NumericError, ShapeError, ValidationError
from pdsfda.seeding import stream

log = logging.getLogger(__name__)

RESULTS_FILE = "runs.jsonl"
STRATEGY_ORDER = ("fixed", "random", "ensemble", "whp")
RUN_ERRORS = (ConfigError, NumericError, ShapeError, ValidationError)


@dataclass
class RunRecord:
    config_hash: str
    seed: int
    strategy: str
    status: str = "ok"
    source_only: dict | None = None
    adapted: dict | None = None
    source_train_accuracy: list = field(default_factory=list)
    beta: float | None = None
    trace_path: str | None = None
    snapshot_path: str | None = None
    wall_time: float = 0.0
    error: str | None = None

    @property
    def key(self) -> tuple:
        return (self.config_hash, self.seed, self.strategy)


# ---------------------------------------------------------------------------
# results file
# ---------------------------------------------------------------------------

def read_records(path) -> list[RunRecord]:
    path = Path(path)
    if not path.exists():
        return []
    out = []
    with path.open(encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(RunRecord(**json.loads(line)))
    return out


def append_record(path, rec: RunRecord) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with FileLock(str(path) + ".lock"):
        with path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(asdict(rec)) + "\n")


def completed(path) -> dict[tuple, RunRecord]:
    return {r.key: r for r in read_records(path) if r.status == "ok"}


# ---------------------------------------------------------------------------
# pipeline pieces
# ---------------------------------------------------------------------------

def data_seed(cfg: ExperimentConfig, seed: int) -> int:
    return cfg.data.seed if cfg.data.seed is not None else seed


def prepare_data(cfg: ExperimentConfig, seed: int) -> tuple[Dataset, Dataset]:
    """Source and (label-shifted) target datasets for one run."""
    dseed = data_seed(cfg, seed)
    if cfg.data.generator is not None:
        spec = GeneratorSpec(**{**asdict(cfg.data.generator), "seed": dseed,
                                "transform": cfg.data.generator.transform})
        source, target = make_shifted_pair(spec)
    else:
        source = load_csv(cfg.data.source_csv, cfg.data.C, "source")
        target = load_csv(cfg.data.target_csv, cfg.data.C, "target")
    shift = cfg.data.label_shift
    if shift.kind != "none":
        shift = type(shift)(shift.kind, shift.p, shift.k, dseed)
        target = apply_label_shift(target, shift)
    return source, target


def source_ensemble(cfg: ExperimentConfig, seed: int, source: Dataset) -> Ensemble:
    ens = build_ensemble(cfg.topology, cfg.archs, source.d, seed)
    st = cfg.source_training
    ens = train_source(ens, source, st.epochs, st.lr, min(st.batch_size, len(source)), seed)
    if cfg.weak_injection.enabled:
        ens = permute_classifier(ens, cfg.weak_injection.member)
    return ens


def _adaptation_config(cfg: ExperimentConfig, seed: int, target: Dataset,
                       strategy: str | None = None) -> adapt_mod.AdaptationConfig:
    a = adapt_mod.AdaptationConfig(**asdict(cfg.adaptation))
    a.seed = seed
    if strategy is not None:
        a.anchor_strategy = strategy
    if a.anchor_strategy == "fixed" and a.anchor_index is None:
        a.anchor_index = cfg.weak_injection.member if cfg.weak_injection.enabled else 0
    if a.proportion_mode == "true" and a.true_proportions is None:
        a.true_proportions = target.class_proportions().tolist()
    return a


def evaluate(ens: Ensemble, data: Dataset) -> metrics.EvalReport:
    P, _ = predict(ens, data.X)
    return metrics.evaluate(P, data.y)


class SourceCache:
    """Source-trained ensembles keyed by seed, shared across strategies and betas."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self._store: dict[int, tuple] = {}

    def get(self, seed: int):
        if seed not in self._store:
            source, target = prepare_data(self.cfg, seed)
            self._store[seed] = (source, target, source_ensemble(self.cfg, seed, source))
        return self._store[seed]


def run_one(cfg: ExperimentConfig, seed: int, out_dir: Path, strategy: str | None = None,
            cache: SourceCache | None = None) -> RunRecord:
    """One full pipeline for one seed; failures become ``status='failed'`` records."""
    strategy = strategy or cfg.adaptation.anchor_strategy
    h = cfg.config_hash()
    t0 = time.perf_counter()
    try:
        source, target, ens = (cache or SourceCache(cfg)).get(seed)
        before = evaluate(ens, target)
        acfg = _adaptation_config(cfg, seed, target, strategy)
        adapted, trace = adapt_mod.adapt_target(ens, target.X, acfg, trace_labels=target.y)
        after = evaluate(adapted, target)
        stem = f"{h}_{seed}_{strategy}"
        (out_dir / "traces").mkdir(parents=True, exist_ok=True)
        (out_dir / "snapshots").mkdir(parents=True, exist_ok=True)
        trace_path = out_dir / "traces" / f"{stem}.jsonl"
        snap_path = out_dir / "snapshots" / f"{stem}.json"
        adapt_mod.write_trace(trace, trace_path)
        save_snapshot(adapted, snap_path)
        return RunRecord(h, seed, strategy, "ok", asdict(before), asdict(after),
                         ens.history["source"]["train_accuracy"], acfg.beta,
                         str(trace_path), str(snap_path), time.perf_counter() - t0)
    except RUN_ERRORS as exc:
        log.error("seed %d (%s) failed: %s", seed, strategy, exc)
        return RunRecord(h, seed, strategy, "failed", wall_time=time.perf_counter() - t0,
                         error=f"{type(exc).__name__}: {exc}")


def _run_seed(args):
    cfg, seed, out_dir, strategy = args
    return run_one(cfg, seed, out_dir, strategy)


def run(cfg: ExperimentConfig, out_dir: Path | None = None, strategy: str | None = None,
        workers: int = 1) -> list[RunRecord]:
    out_dir = Path(out_dir or cfg.output_dir())
    out_dir.mkdir(parents=True, exist_ok=True)
    results = out_dir / RESULTS_FILE
    strategy = strategy or cfg.adaptation.anchor_strategy
    done = completed(results)
    h = cfg.config_hash()
    records: dict[int, RunRecord] = {}
    todo = []
    for seed in cfg.seeds:
        if (h, seed, strategy) in done:
            records[seed] = done[(h, seed, strategy)]
        else:
            todo.append(seed)
    if workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            fresh = list(pool.map(_run_seed, [(cfg, s, out_dir, strategy) for s in todo]))
    else:
        fresh = [run_one(cfg, s, out_dir, strategy) for s in todo]
    for rec in fresh:
        append_record(results, rec)
        records[rec.seed] = rec
    return [records[s] for s in cfg.seeds]


def _accuracy(rec: RunRecord) -> float:
    return rec.adapted["accuracy"] if rec.status == "ok" else float("nan")


def ablate_anchor(cfg: ExperimentConfig, out_dir: Path | None = None) -> dict:
    """Adapt every seed under all four anchor strategies from one source ensemble."""
    out_dir = Path(out_dir or cfg.output_dir())
    out_dir.mkdir(parents=True, exist_ok=True)
    results = out_dir / RESULTS_FILE
    done = completed(results)
    cache = SourceCache(cfg)
    h = cfg.config_hash()
    table = {s: [] for s in STRATEGY_ORDER}
    for seed in cfg.seeds:
        for strategy in STRATEGY_ORDER:
            rec = done.get((h, seed, strategy))
            if rec is None:
                rec = run_one(cfg, seed, out_dir, strategy, cache)
                append_record(results, rec)
            table[strategy].append(_accuracy(rec))
    path = out_dir / "anchor_ablation.csv"
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["seed", *STRATEGY_ORDER])
        for i, seed in enumerate(cfg.seeds):
            w.writerow([seed, *("%.17g" % table[s][i] for s in STRATEGY_ORDER)])
        w.writerow(["mean", *("%.17g" % np.mean(table[s]) for s in STRATEGY_ORDER)])
    return {"seeds": list(cfg.seeds), **table, "csv": str(path)}


def read_ablation_csv(path) -> dict:
    with Path(path).open(encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    return {"header": header, "rows": [[r[0], *map(float, r[1:])] for r in body]}


def sweep_beta(cfg: ExperimentConfig, betas, out_dir: Path | None = None) -> list[dict]:
    """One adaptation per (beta, seed); writes ``beta_sweep.csv``."""
    betas = [float(b) for b in betas]
    if not betas:
        raise ConfigError("beta list is empty")
    if any(b < 0 for b in betas):
        raise ConfigError("beta values must be >= 0")
    if len(set(betas)) != len(betas):
        raise ConfigError("duplicate beta values")
    out_dir = Path(out_dir or cfg.output_dir())
    out_dir.mkdir(parents=True, exist_ok=True)
    results = out_dir / RESULTS_FILE
    done = completed(results)
    cache = SourceCache(cfg)
    rows = []
    for beta in betas:
        bcfg = cfg.with_adaptation(beta=beta)
        cache.cfg = bcfg  # source stage does not depend on beta
        h = bcfg.config_hash()
        accs = []
        strategy = bcfg.adaptation.anchor_strategy
        for seed in cfg.seeds:
            rec = done.get((h, seed, strategy))
            if rec is None:
                rec = run_one(bcfg, seed, out_dir, strategy, cache)
                append_record(results, rec)
            accs.append(_accuracy(rec))
        rows.append({"beta": beta, "mean_accuracy": float(np.mean(accs)),
                     "std_accuracy": float(np.std(accs)), "n": len(accs), "accuracies": accs})
    with (out_dir / "beta_sweep.csv").open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["beta", "mean_accuracy", "std_accuracy", "n"])
        for r in rows:
            w.writerow(["%.17g" % r["beta"], "%.17g" % r["mean_accuracy"],
                        "%.17g" % r["std_accuracy"], r["n"]])
    return rows


# ---------------------------------------------------------------------------
# covariate-shift CI report
# ---------------------------------------------------------------------------

def shift_report(measurements: list[dict], z: float = 1.0) -> list[dict]:
    """Pairwise CI rows from per-run accuracies.

    Each measurement is ``{source, run, domain, accuracy, n}``: the accuracy of a
    model trained on ``source`` when evaluated on ``domain``. For every source,
    run and other domain the row compares in-domain accuracy against the
    cross-domain one.
    """
    index = {}
    for m in measurements:
        missing = {"source", "run", "domain", "accuracy", "n"} - set(m)
        if missing:
            raise ValidationError(f"measurement missing {sorted(missing)}: {m}")
        index[(m["source"], m["run"], m["domain"])] = m
    domains = sorted({m["domain"] for m in measurements} | {m["source"] for m in measurements})
    if len(domains) < 2:
        raise ValidationError("need at least two domains")
    rows = []
    for (src, run_id, dom), m in sorted(index.items(), key=lambda kv: tuple(map(str, kv[0]))):
        if dom != src:
            continue
        for other in domains:
            if other == src:
                continue
            o = index.get((src, run_id, other))
            if o is None:
                raise ValidationError(f"no measurement for source={src} run={run_id} domain={other}")
            ci = metrics.ci_difference(m["accuracy"], int(m["n"]), o["accuracy"], int(o["n"]), z)
            rows.append({"source": src, "run": run_id, "target": other, "p_diff": ci.p_diff,
                         "se_diff": ci.se_diff, "lo": ci.interval[0], "hi": ci.interval[1],
                         "overlaps_zero": ci.overlaps_zero})
    return rows


def measure_domains(cfg: ExperimentConfig) -> list[dict]:
    """Source-only accuracies for every (source domain, seed, evaluation domain).

    Each named domain applies its transform to fresh draws of the configured
    mixture; models train on a domain's train draw and are scored on every
    domain's test draw.
    """
    if not cfg.domains:
        raise ConfigError("config has no domains section")
    gen = cfg.data.generator
    out = []
    for seed in cfg.seeds:
        dseed = data_seed(cfg, seed)
        tests, trains = {}, {}
        for k, (name, t) in enumerate(sorted(cfg.domains.items())):
            tf = Transform(**t)
            spec = GeneratorSpec(**{**asdict(gen), "seed": dseed, "transform": tf})
            Xtr, ytr = sample_mixture(spec, stream(dseed, "domain.train", k))
            Xte, yte = sample_mixture(spec, stream(dseed, "domain.test", k))
            trains[name] = Dataset(tf.apply(Xtr, stream(dseed, "domain.noise.train", k)), ytr, gen.C, name)
            tests[name] = Dataset(tf.apply(Xte, stream(dseed, "domain.noise.test", k)), yte, gen.C, name)
        for name, train in trains.items():
            ens = source_ensemble(cfg, seed, train)
            for dom, test in tests.items():
                acc = evaluate(ens, test).accuracy
                out.append({"source": name, "run": seed, "domain": dom, "accuracy": acc,
                            "n": len(test)})
    return out


def read_measurements(path) -> list[dict]:
    path = Path(path)
    if path.suffix == ".csv":
        with path.open(encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        for r in rows:
            if r.get("accuracy") in (None, "") or r.get("n") in (None, ""):
                raise ValidationError(f"{path}: row missing accuracy or n: {r}")
            r["accuracy"] = float(r["accuracy"])
            r["n"] = int(r["n"])
        return rows
    with path.open(encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
