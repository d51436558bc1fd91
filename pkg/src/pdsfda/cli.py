"""Command line entry point.

Exit codes: 0 success, 1 partial or total run failure, 2 configuration or input error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from pdsfda import config as config_mod
from pdsfda import harness, metrics
from pdsfda.adapt import STRATEGIES as ANCHOR_STRATEGIES
from pdsfda.datagen import load_csv, save_csv
from pdsfda.ensemble import load_snapshot, predict
from pdsfda.errors import ConfigError, ParseError, ShapeError, ValidationError

EXIT_OK, EXIT_FAILED, EXIT_CONFIG = 0, 1, 2


def _load(args) -> config_mod.ExperimentConfig:
    cfg = config_mod.load(args.config)
    if getattr(args, "seed", None):
        if len(set(args.seed)) != len(args.seed):
            raise ConfigError("--seed values must be distinct")
        cfg.seeds = list(args.seed)
    if getattr(args, "strategy", None):
        cfg.adaptation.anchor_strategy = args.strategy
        if args.strategy == "fixed" and cfg.adaptation.anchor_index is None:
            cfg.adaptation.anchor_index = cfg.weak_injection.member if cfg.weak_injection.enabled else 0
        cfg.adaptation.validate(len(cfg.archs), cfg.data.C)
    return cfg


def _status(records) -> int:
    failed = sum(r.status != "ok" for r in records)
    if failed:
        print(f"{failed} of {len(records)} runs failed", file=sys.stderr)
        return EXIT_FAILED
    return EXIT_OK


def cmd_gen_data(args) -> int:
    cfg = _load(args)
    out = cfg.output_dir(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for seed in cfg.seeds:
        source, target = harness.prepare_data(cfg, seed)
        save_csv(source, out / f"source_{seed}.csv")
        save_csv(target, out / f"target_{seed}.csv")
        print(f"seed {seed}: {len(source)} source, {len(target)} target rows -> {out}")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _load(args)
    records = harness.run(cfg, cfg.output_dir(args.out), workers=args.workers)
    for r in records:
        if r.status == "ok":
            print(f"seed {r.seed} [{r.strategy}] source-only {r.source_only['accuracy']:.4f}"
                  f" adapted {r.adapted['accuracy']:.4f}")
        else:
            print(f"seed {r.seed} [{r.strategy}] FAILED {r.error}")
    return _status(records)


def cmd_ablate_anchor(args) -> int:
    cfg = _load(args)
    table = harness.ablate_anchor(cfg, cfg.output_dir(args.out))
    for s in harness.STRATEGY_ORDER:
        vals = table[s]
        print(f"{s:>8}: mean {sum(vals) / len(vals):.4f}")
    print(f"wrote {table['csv']}")
    bad = sum(v != v for s in harness.STRATEGY_ORDER for v in table[s])
    return EXIT_FAILED if bad else EXIT_OK


def cmd_sweep_beta(args) -> int:
    cfg = _load(args)
    rows = harness.sweep_beta(cfg, args.betas, cfg.output_dir(args.out))
    for r in rows:
        print(f"beta {r['beta']:g}: mean {r['mean_accuracy']:.4f} (n={r['n']})")
    bad = sum(a != a for r in rows for a in r["accuracies"])
    return EXIT_FAILED if bad else EXIT_OK


def cmd_shift_report(args) -> int:
    if args.measurements:
        measurements = harness.read_measurements(args.measurements)
        out = Path(args.out or ".")
    else:
        if not args.config:
            raise ConfigError("shift-report needs a config or --measurements")
        cfg = _load(args)
        measurements = harness.measure_domains(cfg)
        out = cfg.output_dir(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "domain_accuracy.jsonl").open("w", encoding="utf-8") as fh:
        for m in measurements:
            fh.write(json.dumps(m) + "\n")
    rows = harness.shift_report(measurements, args.z)
    metrics.write_ci_table(rows, out / "shift_report.csv")
    apart = sum(not r["overlaps_zero"] for r in rows)
    print(f"{len(rows)} rows, {apart} non-overlapping -> {out / 'shift_report.csv'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ens = load_snapshot(args.snapshot)
    data = load_csv(args.data, ens.n_classes)
    P, _ = predict(ens, data.X)
    print(metrics.evaluate(P, data.y, args.bins).to_json())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pdsfda", description="Ensemble source-free domain adaptation experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(name, func, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("config", help="YAML experiment config")
        sp.add_argument("--seed", type=int, action="append", help="override seeds (repeatable)")
        sp.add_argument("--out", help="output directory (overrides config and $%s)" % config_mod.OUTPUT_ENV)
        sp.set_defaults(func=func)
        return sp

    with_config("gen-data", cmd_gen_data, "write source/target CSVs for each seed")
    sp = with_config("run", cmd_run, "train, adapt and record every seed")
    sp.add_argument("--strategy", choices=ANCHOR_STRATEGIES)
    sp.add_argument("--workers", type=int, default=1)
    with_config("ablate-anchor", cmd_ablate_anchor, "compare the four anchor strategies")
    sp = with_config("sweep-beta", cmd_sweep_beta, "adapt under several beta values")
    sp.add_argument("--betas", type=float, nargs="+", default=[0.0, 0.25, 0.5, 1.0, 2.0])
    sp.add_argument("--strategy", choices=ANCHOR_STRATEGIES)

    sp = sub.add_parser("shift-report", help="pairwise accuracy-difference CIs across domains")
    sp.add_argument("config", nargs="?")
    sp.add_argument("--measurements", help="CSV or JSON-lines of source,run,domain,accuracy,n")
    sp.add_argument("--seed", type=int, action="append")
    sp.add_argument("--out")
    sp.add_argument("--z", type=float, default=1.0)
    sp.set_defaults(func=cmd_shift_report)

    sp = sub.add_parser("eval", help="evaluate a saved ensemble snapshot on a labeled CSV")
    sp.add_argument("--snapshot", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--bins", type=int, default=10)
    sp.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ParseError, ShapeError, ValidationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
