"""Experiment orchestration: sweep grids, replicate execution with derived
seeds, RMSE evaluation, and result persistence.

A sweep is a template setting plus one factor varied over a value list. Each
replicate k of a setting draws its data with seed ``base_seed + k``, scores
every method against a Monte Carlo evaluation of the true effect at the trial
units, and emits one record per (method, replicate). Failures of a single
method are recorded with a ``nan`` RMSE and a reason, never aborting the
setting. Records are byte-identical across reruns and across worker counts
(timing column aside): every random stream is derived from the base seed and
the cell coordinates, and results are merged in a fixed order.

Outputs per sweep: ``records.csv`` (one row per record, pinned header),
``summary.csv`` (per-cell mean and standard error over the successful
replicates), ``diagnostics.jsonl`` (per-record details, failure reasons),
and ``manifest.json`` (resolved configs and seeds for reproduction).
"""

from __future__ import annotations

import dataclasses
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from calmcate import __version__
from calmcate.data import derive_seed
from calmcate.dgp import (
    BaselineDgpConfig,
    IhdpConfig,
    LatentDgpConfig,
    TRUE_CATE_DRAWS,
    gen_baseline,
    gen_latent_nonlinear,
    load_ihdp_semi_synthetic,
    with_overrides,
)
from calmcate.estimators import ALL_METHODS, make_estimator

REGIMES = {
    "baseline": (BaselineDgpConfig, gen_baseline),
    "latent": (LatentDgpConfig, gen_latent_nonlinear),
    "ihdp": (IhdpConfig, load_ihdp_semi_synthetic),
}

DEFAULT_REPS = 20
IHDP_REPS = 50
SMOKE_REPS = 3


RECORDS_HEADER = "regime,factor,factor_value,method,replicate,seed,n_r,n_o,rmse,fit_seconds"
SUMMARY_HEADER = "regime,factor,factor_value,method,n_used,n_failed,mean_rmse,se_rmse"

NO_FACTOR = "none"
NO_FACTOR_VALUE = "default"


@dataclass(frozen=True)
class Setting:
    """One fully-specified experiment cell: a DGP config, the methods to
    run, the replicate count, and the base seed."""

    regime: str
    config: object
    methods: tuple
    n_reps: int
    base_seed: int

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}")
        expected = REGIMES[self.regime][0]
        if not isinstance(self.config, expected):
            raise ValueError(
                f"regime {self.regime!r} needs a {expected.__name__} config"
            )
        object.__setattr__(self, "methods", tuple(self.methods))
        if not self.methods:
            raise ValueError("method list must be nonempty")
        for m in self.methods:
            if m not in ALL_METHODS:
                raise ValueError(f"unknown method {m!r}")
        if self.n_reps < 1:
            raise ValueError("n_reps must be at least 1")


@dataclass(frozen=True)
class SweepSpec:
    """A template setting plus one factor varied over a value list."""

    template: Setting
    factor: str
    values: tuple

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(self.values))
        if not self.values:
            raise ValueError("sweep value list must be nonempty")
        names = {f.name for f in dataclasses.fields(self.template.config)}
        if self.factor not in names:
            raise ValueError(
                f"factor {self.factor!r} is not a field of "
                f"{type(self.template.config).__name__}"
            )

    def settings(self):
        return [
            (value, apply_factor(self.template, self.factor, value))
            for value in self.values
        ]


def default_config(regime: str, **overrides):
    if regime not in REGIMES:
        raise ValueError(f"unknown regime {regime!r}")
    cls = REGIMES[regime][0]
    return cls(**overrides)


def default_setting(regime: str, methods=ALL_METHODS, n_reps=None, base_seed=0,
                    **config_overrides) -> Setting:
    if n_reps is None:
        n_reps = IHDP_REPS if regime == "ihdp" else DEFAULT_REPS
    return Setting(
        regime=regime,
        config=default_config(regime, **config_overrides),
        methods=tuple(methods),
        n_reps=n_reps,
        base_seed=base_seed,
    )


def apply_factor(setting: Setting, factor: str, value) -> Setting:
    config = with_overrides(setting.config, **{factor: value})
    return dataclasses.replace(setting, config=config)


def rmse(pred, truth) -> float:
    """Root mean squared gap between an estimate and the truth."""
    pred = np.asarray(pred, dtype=float).ravel()
    truth = np.asarray(truth, dtype=float).ravel()
    if len(pred) != len(truth) or len(pred) == 0:
        raise ValueError("prediction and truth must have equal nonzero length")
    return float(np.sqrt(np.mean((pred - truth) ** 2)))


@dataclass(frozen=True)
class ResultRecord:
    """One (method, replicate) outcome within a setting. A failed fit keeps
    its row with ``rmse`` NaN and the reason in the diagnostics blob."""

    regime: str
    factor: str
    factor_value: str
    method: str
    replicate: int
    seed: int
    n_r: int
    n_o: int
    rmse: float
    fit_seconds: float
    diagnostics: dict = dataclasses.field(default_factory=dict)

    def __post_init__(self):
        bad = not np.isfinite(self.rmse) or self.rmse < 0
        if bad and "failure" not in self.diagnostics:
            raise ValueError("non-finite rmse requires a failure reason")

    @property
    def failed(self) -> bool:
        return not np.isfinite(self.rmse)


def method_defaults(name: str, n_r: int, seed: int) -> dict:
    return {"seed": seed}


def format_value(value) -> str:
    """Canonical factor-value string used in CSV keys."""
    return str(value)


def run_replicate(setting: Setting, factor: str, factor_value, k: int):
    """All method records for replicate ``k`` of one setting.

    The data seed is ``base_seed + k``; truth evaluation and each method get
    streams derived from the base seed and the cell coordinates, so records
    do not depend on execution order.
    """
    _, generator = REGIMES[setting.regime]
    data_seed = setting.base_seed + k
    os_data, rct_data, oracle = generator(setting.config, data_seed)
    truth, _ = oracle.true_cate_batch(
        rct_data.X,
        m=TRUE_CATE_DRAWS,
        seed=derive_seed(setting.base_seed, "truth", k),
    )
    value_str = format_value(factor_value)
    records = []
    for name in setting.methods:
        fit_seed = derive_seed(setting.base_seed, "fit", name, k)
        params = method_defaults(name, rct_data.n, fit_seed)
        start = time.perf_counter()
        try:
            est = make_estimator(name, **params)
            est.fit(os_data, rct_data)
            score = rmse(est.fitted_.cross_fit_predictions, truth)
            diag = {
                "n_folds": int(est.fitted_.provenance.n_folds),
                "cross_fit_violations": int(est.fitted_.provenance.violations()),
            }
            penalty = est.fitted_.diagnostics.get("correction_penalty")
            if penalty is not None:
                diag["correction_penalty"] = float(penalty)
        except Exception as err:  # noqa: BLE001 - failures become records
            score = float("nan")
            diag = {"failure": f"{type(err).__name__}: {err}"}
        elapsed = time.perf_counter() - start
        records.append(
            ResultRecord(
                regime=setting.regime,
                factor=factor,
                factor_value=value_str,
                method=name,
                replicate=k,
                seed=data_seed,
                n_r=rct_data.n,
                n_o=os_data.n,
                rmse=score,
                fit_seconds=elapsed,
                diagnostics=diag,
            )
        )
    return records


def _replicate_task(args):
    setting, factor, factor_value, k = args
    return run_replicate(setting, factor, factor_value, k)


def _run_cells(cells, parallelism: int):
    """Execute (setting, factor, value, k) cells, preserving input order."""
    if parallelism <= 1:
        return [_replicate_task(cell) for cell in cells]
    with ProcessPoolExecutor(max_workers=parallelism) as pool:
        return list(pool.map(_replicate_task, cells))


def run_setting(setting: Setting, parallelism: int = 1, factor: str = NO_FACTOR,
                factor_value=NO_FACTOR_VALUE):
    """All records for one setting, ordered by (replicate, method)."""
    cells = [(setting, factor, factor_value, k) for k in range(setting.n_reps)]
    out = []
    for batch in _run_cells(cells, parallelism):
        out.extend(batch)
    return out


def run_sweep(spec: SweepSpec, out_dir, parallelism: int = 1):
    """Run every value of the sweep and persist records, summary, manifest,
    and per-record diagnostics under ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cells = []
    for value, setting in spec.settings():
        for k in range(setting.n_reps):
            cells.append((setting, spec.factor, value, k))
    records = []
    for batch in _run_cells(cells, parallelism):
        records.extend(batch)
    summary = summarize(records)
    write_records_csv(records, out_dir / "records.csv")
    write_summary_csv(summary, out_dir / "summary.csv")
    write_diagnostics(records, out_dir / "diagnostics.jsonl")
    write_manifest(spec, out_dir / "manifest.json")
    return records, summary


def summarize(records):
    """Per (regime, factor, factor_value, method) mean RMSE and standard
    error over the successful replicates, with failure counts.

    Cell order follows first appearance in ``records``; a single-success
    cell reports SE 0.0 (degenerate, flagged by its n_used column).
    """
    if not records:
        raise ValueError("no records to summarize")
    order = []
    buckets = {}
    for rec in records:
        key = (rec.regime, rec.factor, rec.factor_value, rec.method)
        if key not in buckets:
            buckets[key] = []
            order.append(key)
        buckets[key].append(rec)
    rows = []
    for key in order:
        group = buckets[key]
        values = np.array([r.rmse for r in group if not r.failed])
        n_used = len(values)
        n_failed = len(group) - n_used
        if n_used == 0:
            mean = se = float("nan")
        elif n_used == 1:
            mean, se = float(values[0]), 0.0
        else:
            mean = float(values.mean())
            se = float(values.std(ddof=1) / np.sqrt(n_used))
        rows.append(
            {
                "regime": key[0],
                "factor": key[1],
                "factor_value": key[2],
                "method": key[3],
                "n_used": n_used,
                "n_failed": n_failed,
                "mean_rmse": mean,
                "se_rmse": se,
            }
        )
    return rows


def _float_str(x: float) -> str:
    return repr(float(x))


def write_records_csv(records, path):
    lines = [RECORDS_HEADER]
    for r in records:
        lines.append(
            ",".join(
                [
                    r.regime,
                    r.factor,
                    r.factor_value,
                    r.method,
                    str(r.replicate),
                    str(r.seed),
                    str(r.n_r),
                    str(r.n_o),
                    _float_str(r.rmse),
                    f"{r.fit_seconds:.3f}",
                ]
            )
        )
    Path(path).write_text("\n".join(lines) + "\n")


def write_summary_csv(rows, path):
    lines = [SUMMARY_HEADER]
    for row in rows:
        lines.append(
            ",".join(
                [
                    row["regime"],
                    row["factor"],
                    row["factor_value"],
                    row["method"],
                    str(row["n_used"]),
                    str(row["n_failed"]),
                    _float_str(row["mean_rmse"]),
                    _float_str(row["se_rmse"]),
                ]
            )
        )
    Path(path).write_text("\n".join(lines) + "\n")


def write_diagnostics(records, path):
    lines = []
    for r in records:
        lines.append(
            json.dumps(
                {
                    "factor": r.factor,
                    "factor_value": r.factor_value,
                    "method": r.method,
                    "replicate": r.replicate,
                    **r.diagnostics,
                },
                sort_keys=True,
            )
        )
    Path(path).write_text("\n".join(lines) + "\n")


def write_manifest(spec: SweepSpec, path):
    template = spec.template
    manifest = {
        "package_version": __version__,
        "regime": template.regime,
        "factor": spec.factor,
        "values": [format_value(v) for v in spec.values],
        "methods": list(template.methods),
        "n_reps": template.n_reps,
        "base_seed": template.base_seed,
        "truth_draws": TRUE_CATE_DRAWS,
        "resolved_configs": {
            format_value(v): dataclasses.asdict(s.config)
            for v, s in spec.settings()
        },
    }
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def read_records_csv(path):
    """Records CSV back as a list of dicts with typed rmse/fit_seconds."""
    lines = Path(path).read_text().strip().split("\n")
    if lines[0] != RECORDS_HEADER:
        raise ValueError("unexpected records header")
    names = RECORDS_HEADER.split(",")
    out = []
    for line in lines[1:]:
        row = dict(zip(names, line.split(",")))
        for key in ("replicate", "seed", "n_r", "n_o"):
            row[key] = int(row[key])
        for key in ("rmse", "fit_seconds"):
            row[key] = float(row[key])
        out.append(row)
    return out


# --------------------------------------------------------------------------
# published sweep grids
# --------------------------------------------------------------------------

BASELINE_SWEEPS = (
    ("sigma_v2", (0.1, 0.25, 0.5, 1.0, 2.0)),
    ("d_true", (2, 3, 5, 10, 15, 20)),
    ("n_r", (100, 250, 500, 1000, 2000)),
    ("outcome_form", ("linear", "quadratic", "sinusoidal")),
    ("shift_magnitude", (0.0, 0.25, 0.5, 1.0, 2.0, 5.0)),
    ("shared_proportion", (0.3, 0.5, 0.7, 0.9)),
)

LATENT_SWEEPS = (
    ("omega", (0.5, 1.0, 1.5, 2.0)),
    ("w_z", (0.0, 0.5, 1.0, 1.5, 2.0)),
    ("n_r", (100, 200, 500, 1000, 2000)),
    ("alpha_u", (0.5, 1.0, 2.0, 3.0, 4.0)),
    ("cate_form", ("sin", "abs", "quad")),
)


def paper_grid(methods=ALL_METHODS, n_reps=None, base_seed=0):
    """Every published sweep as a SweepSpec, plus the semi-synthetic setting.

    Returns (sweeps, ihdp_setting). The synthetic grids hold 29 + 22 = 51
    settings; the semi-synthetic benchmark is one more.
    """
    sweeps = []
    for regime, grid in (("baseline", BASELINE_SWEEPS), ("latent", LATENT_SWEEPS)):
        template = default_setting(
            regime, methods=methods,
            n_reps=DEFAULT_REPS if n_reps is None else n_reps,
            base_seed=base_seed,
        )
        for factor, values in grid:
            sweeps.append(SweepSpec(template=template, factor=factor, values=values))
    ihdp = default_setting(
        "ihdp", methods=methods,
        n_reps=IHDP_REPS if n_reps is None else n_reps,
        base_seed=base_seed,
    )
    return sweeps, ihdp


def run_paper_grid(out_dir, parallelism: int = 1, methods=ALL_METHODS,
                   n_reps=None, base_seed=0):
    """Run the full published grid, one subdirectory per sweep."""
    out_dir = Path(out_dir)
    sweeps, ihdp = paper_grid(methods=methods, n_reps=n_reps, base_seed=base_seed)
    for spec in sweeps:
        sub = out_dir / f"{spec.template.regime}_{spec.factor}"
        run_sweep(spec, sub, parallelism=parallelism)
    ihdp_records = run_setting(ihdp, parallelism=parallelism)
    sub = out_dir / "ihdp"
    sub.mkdir(parents=True, exist_ok=True)
    write_records_csv(ihdp_records, sub / "records.csv")
    write_summary_csv(summarize(ihdp_records), sub / "summary.csv")
    write_diagnostics(ihdp_records, sub / "diagnostics.jsonl")
    return out_dir
