"""Command-line entry point: ``otafl {run,sweep,verify,ledger}``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace

from .config import ConfigError, load_config


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def cmd_run(args) -> int:
    from .experiments import run_experiment, summarize

    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seeds=(args.seed,))
    out = args.out or cfg.output_dir
    traces = run_experiment(cfg, out)
    for proto, m in sorted(summarize(traces).items()):
        vals = ", ".join(f"{k}={v:.6g}" for k, v in m.items() if v is not None)
        print(f"{proto}: {vals}")
    print(f"wrote {out}/traces.csv and {out}/manifest.json")
    return 0


def cmd_sweep(args) -> int:
    from .experiments import run_sweep

    cfg = load_config(args.config)
    grid = {
        "clusters": _ints(args.clusters) if args.clusters else None,
        "classes": _ints(args.classes) if args.classes else None,
        "snr": _floats(args.snr) if args.snr else None,
        "lambda": _floats(args.lambda_p) if args.lambda_p else None,
    }
    if not any(grid.values()):
        raise ConfigError("sweep needs at least one of --clusters, --classes, --snr, --lambda")
    out = args.out or cfg.output_dir
    rows = run_sweep(cfg, grid, out, jobs=args.jobs)
    for r in rows:
        axes = " ".join(f"{k}={r[k]}" for k in ("clusters", "classes", "snr", "lambda") if r[k] != "")
        acc = "" if r["accuracy"] is None else f" accuracy={r['accuracy']:.4f}"
        dist = "" if r["distance"] is None else f" distance={r['distance']:.4g}"
        print(f"{axes} {r['protocol']}:{acc}{dist}")
    print(f"wrote {out}/summary.csv")
    return 0


def cmd_verify(args) -> int:
    from .acceptance import CRITERIA, check_csv, run_criteria

    if args.csv:
        problems = check_csv(args.csv)
        for p in problems:
            print(f"FAIL {args.csv}: {p}")
        if not problems:
            print(f"PASS {args.csv}: rows parse, column count constant, channel uses non-decreasing")
        return 1 if problems else 0
    only = _ints(args.only) if args.only else sorted(CRITERIA)
    results = run_criteria(only, quick=args.quick)
    for r in results:
        print(r.line())
    return 0 if all(r.passed for r in results) else 1


def cmd_ledger(args) -> int:
    from .experiments import channel_ledger

    rows = channel_ledger(args.K, args.C, args.rounds)
    print(f"{'protocol':<10}{'per slot':>10}{'total':>10}   (K={args.K}, C={args.C}, slots={args.rounds})")
    for proto, per, total in rows:
        print(f"{proto:<10}{per:>10}{total:>10}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="otafl", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one experiment config")
    r.add_argument("--config", required=True)
    r.add_argument("--seed", type=int)
    r.add_argument("--out")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="grid over clusters / classes / SNR / lambda_p")
    s.add_argument("--config", required=True)
    s.add_argument("--clusters")
    s.add_argument("--classes")
    s.add_argument("--snr")
    s.add_argument("--lambda", dest="lambda_p")
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--out")
    s.set_defaults(func=cmd_sweep)

    v = sub.add_parser("verify", help="run the acceptance criteria")
    v.add_argument("--only", help="comma-separated criterion numbers")
    v.add_argument("--quick", action="store_true", help="reduced seeds/horizons (smoke check)")
    v.add_argument("--csv", help="check a traces.csv file instead")
    v.set_defaults(func=cmd_verify)

    led = sub.add_parser("ledger", help="channel uses per protocol")
    led.add_argument("--K", type=int, default=25)
    led.add_argument("--C", type=int, default=4)
    led.add_argument("--rounds", type=int, default=50)
    led.set_defaults(func=cmd_ledger)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
