"""Command-line entry points for running sweeps and verification suites.

Subcommands:

* ``sweep`` runs one factor sweep and writes records/summary/manifest CSVs.
* ``run-one`` runs a single fully-specified setting from a JSON config.
* ``paper-grid`` enumerates every published sweep plus the semi-synthetic
  benchmark into per-sweep subdirectories.
* ``verify`` runs the test suites (requires a source checkout with tests/).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import subprocess
import sys
from pathlib import Path

from calmcate.estimators import ALL_METHODS
from calmcate.harness import (
    NO_FACTOR,
    NO_FACTOR_VALUE,
    REGIMES,
    SweepSpec,
    default_setting,
    run_paper_grid,
    run_setting,
    run_sweep,
    summarize,
    write_diagnostics,
    write_records_csv,
    write_summary_csv,
)

VERIFY_SUITES = {
    "unit": ["-m", "not acceptance and not invariants"],
    "invariants": ["-m", "invariants"],
    "acceptance": ["-m", "acceptance"],
}


def _parse_value(token: str):
    for cast in (int, float):
        try:
            return cast(token)
        except ValueError:
            continue
    return token


def _parse_values(text: str):
    tokens = [t.strip() for t in text.split(",") if t.strip()]
    return [_parse_value(t) for t in tokens]


def _parse_methods(text: str):
    methods = tuple(t.strip() for t in text.split(",") if t.strip())
    for m in methods:
        if m not in ALL_METHODS:
            known = ", ".join(ALL_METHODS)
            raise SystemExit(f"unknown method {m!r}; known methods: {known}")
    return methods


def load_setting_config(path):
    """A Setting from a JSON file; unknown keys are rejected at both the
    top level and inside the ``config`` block."""
    raw = json.loads(Path(path).read_text())
    if not isinstance(raw, dict):
        raise ValueError("config file must hold a JSON object")
    allowed = {"regime", "config", "methods", "n_reps", "base_seed"}
    unknown = set(raw) - allowed
    if unknown:
        raise ValueError(
            f"unknown config keys: {sorted(unknown)}; allowed: {sorted(allowed)}"
        )
    if "regime" not in raw:
        raise ValueError("config requires a 'regime' key")
    regime = raw["regime"]
    if regime not in REGIMES:
        raise ValueError(f"unknown regime {regime!r}")
    overrides = raw.get("config", {})
    if not isinstance(overrides, dict):
        raise ValueError("'config' must be an object of DGP fields")
    field_names = {f.name for f in dataclasses.fields(REGIMES[regime][0])}
    bad = set(overrides) - field_names
    if bad:
        raise ValueError(
            f"unknown DGP config keys for regime {regime!r}: {sorted(bad)}"
        )
    kwargs = {}
    if "methods" in raw:
        kwargs["methods"] = tuple(raw["methods"])
    if "n_reps" in raw:
        kwargs["n_reps"] = int(raw["n_reps"])
    if "base_seed" in raw:
        kwargs["base_seed"] = int(raw["base_seed"])
    return default_setting(regime, **kwargs, **overrides)


def _cmd_sweep(args):
    template = default_setting(
        args.regime,
        methods=_parse_methods(args.methods),
        n_reps=args.reps,
        base_seed=args.seed,
    )
    spec = SweepSpec(
        template=template, factor=args.factor, values=_parse_values(args.values)
    )
    run_sweep(spec, args.out, parallelism=args.jobs)
    print(f"wrote {Path(args.out) / 'records.csv'}")
    return 0


def _cmd_run_one(args):
    setting = load_setting_config(args.config)
    records = run_setting(setting, parallelism=args.jobs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_records_csv(records, out / "records.csv")
    write_summary_csv(summarize(records), out / "summary.csv")
    write_diagnostics(records, out / "diagnostics.jsonl")
    manifest = {
        "regime": setting.regime,
        "factor": NO_FACTOR,
        "values": [NO_FACTOR_VALUE],
        "methods": list(setting.methods),
        "n_reps": setting.n_reps,
        "base_seed": setting.base_seed,
        "resolved_configs": {
            NO_FACTOR_VALUE: dataclasses.asdict(setting.config)
        },
    }
    (out / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    )
    print(f"wrote {out / 'records.csv'}")
    return 0


def _cmd_paper_grid(args):
    run_paper_grid(
        args.out,
        parallelism=args.jobs,
        n_reps=args.reps,
        base_seed=args.seed,
    )
    print(f"wrote {args.out}")
    return 0


def _cmd_verify(args):
    cmd = [sys.executable, "-m", "pytest"] + VERIFY_SUITES[args.suite]
    return subprocess.call(cmd)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="calmcate",
        description="Run simulation sweeps for trial-plus-observational CATE estimation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sweep = sub.add_parser("sweep", help="run one factor sweep")
    sweep.add_argument("--regime", choices=sorted(REGIMES), required=True)
    sweep.add_argument("--factor", required=True)
    sweep.add_argument("--values", required=True, help="comma-separated values")
    sweep.add_argument("--methods", default=",".join(ALL_METHODS))
    sweep.add_argument("--reps", type=int, default=None)
    sweep.add_argument("--seed", type=int, default=0)
    sweep.add_argument("--jobs", type=int, default=1)
    sweep.add_argument("--out", required=True)
    sweep.set_defaults(func=_cmd_sweep)

    run_one = sub.add_parser("run-one", help="run a single setting from JSON")
    run_one.add_argument("--config", required=True)
    run_one.add_argument("--out", required=True)
    run_one.add_argument("--jobs", type=int, default=1)
    run_one.set_defaults(func=_cmd_run_one)

    grid = sub.add_parser("paper-grid", help="run every published sweep")
    grid.add_argument("--out", required=True)
    grid.add_argument("--reps", type=int, default=None)
    grid.add_argument("--seed", type=int, default=0)
    grid.add_argument("--jobs", type=int, default=1)
    grid.set_defaults(func=_cmd_paper_grid)

    verify = sub.add_parser("verify", help="run a test suite")
    verify.add_argument("--suite", choices=sorted(VERIFY_SUITES), required=True)
    verify.set_defaults(func=_cmd_verify)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ValueError as err:
        raise SystemExit(f"error: {err}") from None


if __name__ == "__main__":
    sys.exit(main())
