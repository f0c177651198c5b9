"""Command line entry point: ``fairsync {gen,run,sweep,verify}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .core import ContractError
from .datagen import save_corpus
from .experiment import SWEEPABLE, ExperimentConfig, execute, sweep, write_outputs
from .verify import run_verification

log = logging.getLogger("fairsync")

OVERRIDES = {"K": int, "B": int, "eta": float, "algorithm": str, "seed": int, "out": str, "M": int,
             "T": int, "m": int, "lambda": float}


def _add_overrides(p: argparse.ArgumentParser):
    for name, kind in OVERRIDES.items():
        p.add_argument(f"--{name}", type=kind, dest=f"ov_{name}", default=None)


def _config(args) -> ExperimentConfig:
    data = {}
    if args.config:
        with open(args.config) as fh:
            data = json.load(fh)
    for name in OVERRIDES:
        value = getattr(args, f"ov_{name}")
        if value is not None:
            data[name] = value
            if name == "m":
                data.pop("m_file", None)
                data.pop("m_range", None)
    return ExperimentConfig.from_dict(data)


def cmd_gen(args) -> int:
    cfg = _config(args)
    corpus = cfg.build_corpus()
    paths = save_corpus(corpus, cfg.out)
    for key, path in paths.items():
        print(f"{key}: {path}")
    return 0


def cmd_run(args) -> int:
    cfg = _config(args)
    outcome = execute(cfg)
    out = write_outputs(outcome)
    ev = outcome.evaluation
    print(f"{cfg.algorithm}: recall={ev.recall:.4f} ndcg={ev.ndcg:.4f} hr={ev.hr:.4f} esp={ev.esp:.4f} -> {out}")
    return 0


def _parse_values(raw: str, param: str) -> list:
    if not raw.strip():
        return []
    return [SWEEPABLE[param](v) for v in raw.split(",") if v.strip()]


def cmd_sweep(args) -> int:
    cfg = _config(args)
    if args.sweep:
        spec = json.loads(Path(args.sweep).read_text())
        param, values = spec["param"], spec.get("values", [])
    else:
        if not args.param:
            raise ContractError("sweep needs --param/--values or a --sweep file")
        param, values = args.param, _parse_values(args.values or "", args.param)
    if param not in SWEEPABLE:
        raise ContractError(f"cannot sweep {param!r}; choose from {sorted(SWEEPABLE)}")
    if not values:
        print("empty sweep, nothing to do")
        return 0
    rows = sweep(cfg, param, values, parallel=args.parallel)
    for row in rows:
        if row.get("error"):
            print(f"{param}={row['value']}: ERROR {row['error']}")
        else:
            print(f"{param}={row['value']}: recall={row['recall']:.4f} esp={row['esp']:.4f} p50={row['p50_ms']:.3f}ms")
    return 0


def cmd_verify(args) -> int:
    results = run_verification(args.budget, args.seed, args.mu_samples, sign_flip=args.inject_sign_flip)
    failed = [r for r in results if not r.passed]
    for r in results:
        print(r.line())
    report = {r.name: {"passed": r.passed, "checked": r.checked, "worst": r.worst, "seconds": r.seconds,
                       **r.notes} for r in results}
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "verify.json").write_text(json.dumps(report, indent=2) + "\n")
    for r in failed:
        blob = json.dumps({"suite": r.name, **r.failure}, indent=2)
        if args.out:
            path = Path(args.out) / f"failure_{r.name}.json"
            path.write_text(blob + "\n")
            print(f"offending case written to {path}", file=sys.stderr)
        else:
            print(blob, file=sys.stderr)
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fairsync", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, fn, help_ in (("gen", cmd_gen, "write a corpus to files"),
                            ("run", cmd_run, "run one experiment"),
                            ("sweep", cmd_sweep, "run one experiment per parameter value")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("config", nargs="?", help="flat JSON config file")
        _add_overrides(p)
        p.set_defaults(func=fn)
        if name == "sweep":
            p.add_argument("--sweep", help="JSON file with {\"param\": ..., \"values\": [...]}")
            p.add_argument("--param", choices=sorted(SWEEPABLE))
            p.add_argument("--values", help="comma-separated values")
            p.add_argument("--parallel", action="store_true")

    p = sub.add_parser("verify", help="run the brute-force oracle suites")
    p.add_argument("--budget", type=int, default=100, help="number of tiny instances")
    p.add_argument("--mu-samples", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.add_argument("--inject-sign-flip", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ContractError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
