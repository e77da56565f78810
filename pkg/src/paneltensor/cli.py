"""Command-line entry points: data ingestion, method comparison, cross-validation,
bootstrap intervals, simulation tables, and the layers-versus-error experiment.

Reports are CSV tables plus a JSON run manifest (config hash, seed, versions);
everything is deterministic given the seed. Exit codes: 0 success, 1 input
error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence

import numpy as np

from . import __version__
from .baselines import (
    NBModelSpec,
    as_completion_dataset,
    delta_method_interval,
    fit_nb,
    impute_nb,
)
from .causal import bootstrap_interval, estimate_delta, impute_counterfactuals, select_lambda
from .panel import PanelDataset
from .simulate import SimScenario, rate_experiment, run_comparison
from .solver import NumericalError, SolverConfig

__all__ = ["RunConfig", "LoadedPanel", "load_panel", "export_panel", "main"]

ALL_METHODS = ("LL1", "LL2", "LL3", "MC1", "MC2", "TC")


@dataclass
class RunConfig:
    """Run settings; JSON-serializable, flat, human-editable."""

    primary_outcome: str = "primary"
    control_outcomes: List[str] = field(default_factory=list)
    covariate_columns: List[str] = field(default_factory=list)
    offset_column: Optional[str] = None
    transform: str = "log1p"
    methods: List[str] = field(default_factory=lambda: list(ALL_METHODS))
    lam: Optional[float] = None
    lambda_grid_size: int = 20
    lambda_grid_floor: float = 1e-3
    folds: Optional[int] = None
    bootstrap_reps: int = 100
    seed: int = 0
    max_iters: int = 500
    tol: float = 1e-7
    center: bool = True
    debias: bool = True
    continuation: bool = True

    def __post_init__(self):
        overlap = set(self.control_outcomes) & {self.primary_outcome}
        if overlap:
            raise ValueError("control outcomes must be disjoint from the primary outcome")

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        with open(path) as fh:
            raw = json.load(fh)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**raw)

    def solver_config(self, lam: float = 0.0) -> SolverConfig:
        return SolverConfig(
            lam=lam, max_iters=self.max_iters, tol=self.tol,
            continuation=self.continuation, center=self.center, debias=self.debias,
        )

    def auto_folds(self, n_entries: int, n_eligible: int) -> int:
        if self.folds is not None:
            return min(self.folds, n_eligible)
        # leave-one-out on small problems, 10-fold otherwise
        return n_eligible if n_entries <= 5000 else min(10, n_eligible)


class LoadedPanel(NamedTuple):
    dataset: PanelDataset
    unit_ids: List[str]
    periods: List[int]
    gaps: List[str]


def load_panel(path, cfg: RunConfig) -> LoadedPanel:
    """Read a long-format CSV (unit_id, period, outcome_id, value, treated, ...).

    Cells absent for an outcome become missing-mask entries and are listed in
    the gap report. Duplicate (unit, period, outcome) triples and non-numeric
    values are input errors with row numbers.
    """
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ValueError(f"{path}: empty file")
        need = {"unit_id", "period", "outcome_id", "value"}
        missing_cols = need - set(reader.fieldnames)
        if missing_cols:
            raise ValueError(f"{path}: missing columns {sorted(missing_cols)}")
        for lineno, rec in enumerate(reader, start=2):
            rows.append((lineno, rec))
    if not rows:
        raise ValueError(f"{path}: no data rows")

    outcomes = [cfg.primary_outcome] + list(cfg.control_outcomes)
    seen = {}
    units, periods = [], []
    for lineno, rec in rows:
        key = (rec["unit_id"], rec["period"], rec["outcome_id"])
        if key in seen:
            raise ValueError(
                f"{path}: duplicate (unit, period, outcome) at rows {seen[key]} and {lineno}"
            )
        seen[key] = lineno
        units.append(rec["unit_id"])
        try:
            periods.append(int(rec["period"]))
        except ValueError as exc:
            raise ValueError(f"{path}: non-integer period at row {lineno}") from exc

    unit_ids = sorted(set(units))
    period_ids = sorted(set(periods))
    ui = {u: i for i, u in enumerate(unit_ids)}
    pi = {p: i for i, p in enumerate(period_ids)}
    n, t = len(unit_ids), len(period_ids)

    mats = {o: np.full((n, t), np.nan) for o in outcomes}
    w = np.zeros((n, t))
    covs = {c: np.full((n, t), np.nan) for c in cfg.covariate_columns}
    offs = np.full(n, np.nan)

    for lineno, rec in rows:
        o = rec["outcome_id"]
        if o not in mats:
            continue  # outcome not referenced by the config
        i, j = ui[rec["unit_id"]], pi[int(rec["period"])]
        try:
            val = float(rec["value"])
        except ValueError as exc:
            raise ValueError(f"{path}: non-numeric value at row {lineno}") from exc
        mats[o][i, j] = val
        if o == cfg.primary_outcome:
            tr = rec.get("treated")
            if tr not in (None, ""):
                if tr not in ("0", "1"):
                    raise ValueError(f"{path}: treated must be 0 or 1 at row {lineno}")
                w[i, j] = float(tr)
            for c in cfg.covariate_columns:
                raw = rec.get(c)
                if raw in (None, ""):
                    raise ValueError(f"{path}: covariate {c!r} missing at row {lineno}")
                covs[c][i, j] = float(raw)
            if cfg.offset_column:
                raw = rec.get(cfg.offset_column)
                if raw in (None, ""):
                    raise ValueError(f"{path}: offset {cfg.offset_column!r} missing at row {lineno}")
                val_off = float(raw)
                if np.isfinite(offs[i]) and offs[i] != val_off:
                    raise ValueError(
                        f"{path}: offset must be constant within unit {rec['unit_id']!r}"
                    )
                offs[i] = val_off

    gaps = []
    prim = mats[cfg.primary_outcome]
    y_missing = np.isnan(prim)
    for i, j in np.argwhere(y_missing):
        gaps.append(f"{cfg.primary_outcome}:{unit_ids[i]}:{period_ids[j]}")
    control_list, control_masks = [], []
    for o in cfg.control_outcomes:
        m = np.isnan(mats[o])
        for i, j in np.argwhere(m):
            gaps.append(f"{o}:{unit_ids[i]}:{period_ids[j]}")
        control_list.append(np.where(m, 0.0, mats[o]))
        control_masks.append(m if m.any() else None)

    for c in cfg.covariate_columns:
        if np.isnan(covs[c]).any():
            raise ValueError(f"{path}: covariate {c!r} not fully specified on primary rows")
    if cfg.offset_column and np.isnan(offs).any():
        raise ValueError(f"{path}: offset {cfg.offset_column!r} not specified for every unit")

    dataset = PanelDataset(
        y_obs=np.where(y_missing, 0.0, prim),
        w=w,
        controls=control_list,
        control_masks=control_masks if any(m is not None for m in control_masks) else None,
        covariates={c: covs[c] for c in cfg.covariate_columns},
        offsets=None if not cfg.offset_column else offs,
        transform=cfg.transform,
        y_missing=y_missing if y_missing.any() else None,
    )
    return LoadedPanel(dataset=dataset, unit_ids=unit_ids, periods=period_ids, gaps=gaps)


def export_panel(loaded: LoadedPanel, path, cfg: RunConfig) -> None:
    """Write a panel back to the long CSV format accepted by :func:`load_panel`."""
    d = loaded.dataset
    cols = ["unit_id", "period", "outcome_id", "value", "treated"]
    cols += list(cfg.covariate_columns)
    if cfg.offset_column:
        cols.append(cfg.offset_column)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        names = [cfg.primary_outcome] + list(cfg.control_outcomes)
        for o_idx, o in enumerate(names):
            for i, u in enumerate(loaded.unit_ids):
                for j, p in enumerate(loaded.periods):
                    if o_idx == 0:
                        if d.y_missing is not None and d.y_missing[i, j]:
                            continue
                        val = d.y_obs[i, j]
                        row = [u, p, o, _fmt(val), int(d.w[i, j])]
                        row += [_fmt(d.covariates[c][i, j]) for c in cfg.covariate_columns]
                        if cfg.offset_column:
                            row.append(_fmt(d.offsets[i]))
                    else:
                        mask = None if d.control_masks is None else d.control_masks[o_idx - 1]
                        if mask is not None and mask[i, j]:
                            continue
                        val = d.controls[o_idx - 1][i, j]
                        row = [u, p, o, _fmt(val), ""]
                        row += [""] * len(cfg.covariate_columns)
                        if cfg.offset_column:
                            row.append("")
                    writer.writerow(row)


def _fmt(x) -> str:
    # repr of a float is the shortest string that parses back exactly
    return repr(float(x))


def _write_table(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            out = []
            for v in row:
                if isinstance(v, (bool, np.bool_, int, np.integer)):
                    out.append(str(int(v)))
                elif isinstance(v, (float, np.floating)):
                    out.append(_fmt(v))
                else:
                    out.append(str(v))
            writer.writerow(out)


def _write_manifest(outdir: Path, cfg: RunConfig, command: str, extra: Optional[Dict] = None):
    payload = {
        "command": command,
        "config": asdict(cfg),
        "config_sha256": hashlib.sha256(
            json.dumps(asdict(cfg), sort_keys=True).encode()
        ).hexdigest(),
        "package_version": __version__,
        "numpy_version": np.__version__,
    }
    if extra:
        payload.update(extra)
    with open(outdir / "manifest.json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _select_lambda_for(cfg: RunConfig, dataset: PanelDataset, seed: int):
    from .causal import panel_masked_matrix
    from .solver import default_lambda_grid

    if cfg.lam is not None:
        return float(cfg.lam), []
    mm, eligible = panel_masked_matrix(dataset)
    n_entries = mm.values.size
    n_elig = int((mm.observed & eligible).sum())
    folds = cfg.auto_folds(n_entries, n_elig)
    grid = default_lambda_grid(mm, n=cfg.lambda_grid_size, floor=cfg.lambda_grid_floor)
    return select_lambda(dataset, cfg.solver_config(), folds=folds, seed=seed, grid=grid)


def _nb_out_of_sample_mse(data: PanelDataset, spec: NBModelSpec, folds: int, seed: int) -> float:
    """K-fold holdout MSE (transform scale) of an NB variant on untreated cells."""
    obs = data.w == 0
    if data.y_missing is not None:
        obs &= ~data.y_missing
    cells = np.argwhere(obs)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(cells))
    fold_of = np.empty(len(cells), dtype=int)
    fold_of[order] = np.arange(len(cells)) % folds
    errs = []
    for f in range(folds):
        hold = cells[fold_of == f]
        if len(hold) == 0:
            continue
        w2 = data.w.copy()
        w2[hold[:, 0], hold[:, 1]] = 1.0  # hide them from the fit
        try:
            fit = fit_nb(replace_panel(data, w=w2), spec)
        except ValueError:
            return float("nan")
        pred = impute_nb(fit, hold)
        truth = data.y_obs[hold[:, 0], hold[:, 1]]
        errs.append(np.mean((np.log1p(pred) - np.log1p(truth)) ** 2))
    return float(np.mean(errs))


def replace_panel(d: PanelDataset, **kw) -> PanelDataset:
    base = dict(
        y_obs=d.y_obs, w=d.w, controls=list(d.controls),
        control_masks=None if d.control_masks is None else list(d.control_masks),
        covariates=dict(d.covariates), offsets=d.offsets,
        transform=d.transform, y_missing=d.y_missing,
    )
    base.update(kw)
    return PanelDataset(**base)


def cmd_fit(args, cfg: RunConfig) -> int:
    outdir = Path(args.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    loaded = load_panel(args.data, cfg)
    data = loaded.dataset
    z_obs = data.apply_transform(data.y_obs)
    obs = (data.w == 0) & (~data.y_missing if data.y_missing is not None else True)

    rows = []
    for method in cfg.methods:
        if method not in ALL_METHODS:
            raise ValueError(f"unknown method {method!r}")
        if method in ("LL1", "LL2", "LL3"):
            spec = NBModelSpec(variant=method)
            fit = fit_nb(data, spec)
            yhat = impute_nb(fit, np.argwhere(np.ones_like(data.w, dtype=bool)))
            yhat = yhat.reshape(data.w.shape)
            in_mse = float(np.mean((np.log1p(yhat)[obs] - np.log1p(data.y_obs)[obs]) ** 2))
            folds = min(10, int(obs.sum()))
            out_mse = _nb_out_of_sample_mse(data, spec, folds, cfg.seed)
            eff = estimate_delta(data.y_obs, yhat, data.w)
            lo, hi = delta_method_interval(fit, data)
        else:
            target = data if method == "TC" else as_completion_dataset(data, method)
            lam, _ = _select_lambda_for(cfg, target, cfg.seed)
            scfg = cfg.solver_config(lam)
            y0_hat, diag = impute_counterfactuals(target, scfg, cv_folds=10, cv_seed=cfg.seed)
            in_mse = float(np.mean((np.log1p(y0_hat)[obs] - np.log1p(data.y_obs)[obs]) ** 2))
            out_mse = diag.out_of_sample_mse
            eff = estimate_delta(data.y_obs, y0_hat, data.w)
            if cfg.bootstrap_reps >= 2:
                lo, hi, _ = bootstrap_interval(target, scfg, cfg.bootstrap_reps, cfg.seed)
            else:
                lo, hi = float("nan"), float("nan")
        rows.append([method, in_mse, out_mse, eff.delta_hat, lo, hi])

    _write_table(outdir / "comparison.csv",
                 ["method", "in_sample_mse", "out_of_sample_mse", "delta_hat",
                  "interval_lo", "interval_hi"], rows)
    _write_manifest(outdir, cfg, "fit", {"n_gaps": len(loaded.gaps), "gaps": loaded.gaps})
    return 0


def cmd_cv(args, cfg: RunConfig) -> int:
    outdir = Path(args.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    loaded = load_panel(args.data, cfg)
    cfg_nolam = replace(cfg, lam=None)
    lam, table = _select_lambda_for(cfg_nolam, loaded.dataset, cfg.seed)
    _write_table(outdir / "cv.csv", ["lambda", "mean_mse"], table)
    _write_manifest(outdir, cfg, "cv", {"lambda_star": lam})
    return 0


def cmd_bootstrap(args, cfg: RunConfig) -> int:
    outdir = Path(args.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    loaded = load_panel(args.data, cfg)
    lam, _ = _select_lambda_for(cfg, loaded.dataset, cfg.seed)
    scfg = cfg.solver_config(lam)
    lo, hi, draws = bootstrap_interval(loaded.dataset, scfg, cfg.bootstrap_reps, cfg.seed)
    _write_table(outdir / "bootstrap_draws.csv", ["rep", "delta_hat"],
                 [[i, d] for i, d in enumerate(draws)])
    _write_table(outdir / "bootstrap_interval.csv", ["lo", "hi", "reps"],
                 [[lo, hi, len(draws)]])
    _write_manifest(outdir, cfg, "bootstrap", {"lambda_star": lam})
    return 0


def cmd_simulate(args, cfg: RunConfig) -> int:
    outdir = Path(args.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    scenario = SimScenario(which=args.scenario, mechanism=args.mechanism, seed=cfg.seed)
    methods = cfg.methods if args.methods is None else args.methods.split(",")
    methods = [m for m in methods if m != "MC2"] if args.methods is None else methods
    result = run_comparison(scenario, methods=methods, reps=args.reps, seed=cfg.seed)
    rows = []
    for m in methods:
        res = result.per_method[m]
        mape = np.concatenate([np.asarray(x) for x in res.mape_per_cell])
        mape = mape[np.isfinite(mape)]
        rows.append([
            m, res.mean_mse, result.truth_delta, res.mean_delta,
            float(np.mean(mape)), float(np.percentile(mape, 2.5)),
            float(np.percentile(mape, 97.5)),
        ])
    _write_table(outdir / f"simulate_{args.scenario}.csv",
                 ["method", "mse_masked", "truth_delta", "delta_hat",
                  "mape_mean", "mape_q025", "mape_q975"], rows)
    _write_manifest(outdir, cfg, "simulate",
                    {"scenario": args.scenario, "reps": args.reps, "methods": methods})
    return 0


def cmd_rate(args, cfg: RunConfig) -> int:
    outdir = Path(args.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    k_grid = [int(k) for k in args.k_grid.split(",")]
    rows = []
    child = np.random.SeedSequence(cfg.seed).spawn(args.seeds)
    for s in range(args.seeds):
        seed_s = int(child[s].generate_state(1)[0] % (2**31))
        table = rate_experiment(args.rank, args.n_units, args.n_periods, k_grid,
                                args.noise_sd, seed_s)
        for k, rmse in table:
            rows.append([s, k, rmse])
    _write_table(outdir / "rate.csv", ["seed", "k", "masked_rmse"], rows)
    _write_manifest(outdir, cfg, "rate", {"k_grid": k_grid, "n_seeds": args.seeds})
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="paneltensor",
        description="Counterfactual imputation for multi-outcome panels via "
                    "nuclear-norm tensor completion.",
    )
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--output-dir", default="reports", help="directory for report files")
    sub = p.add_subparsers(dest="command", required=True)

    for name in ("fit", "cv", "bootstrap"):
        sp = sub.add_parser(name)
        sp.add_argument("--data", required=True, help="long-format panel CSV")

    sp = sub.add_parser("simulate")
    sp.add_argument("--scenario", choices=("S1", "S2", "S3"), required=True)
    sp.add_argument("--mechanism", default="mcar",
                    choices=("mcar", "mcar_within_season", "propensity"))
    sp.add_argument("--reps", type=int, default=20)
    sp.add_argument("--methods", default=None, help="comma-separated method ids")

    sp = sub.add_parser("rate")
    sp.add_argument("--rank", type=int, default=2)
    sp.add_argument("--n-units", type=int, default=50)
    sp.add_argument("--n-periods", type=int, default=8)
    sp.add_argument("--k-grid", default="1,2,4,8")
    sp.add_argument("--noise-sd", type=float, default=0.5)
    sp.add_argument("--seeds", type=int, default=50)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = RunConfig.from_json(args.config) if args.config else RunConfig()
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        handler = {
            "fit": cmd_fit,
            "cv": cmd_cv,
            "bootstrap": cmd_bootstrap,
            "simulate": cmd_simulate,
            "rate": cmd_rate,
        }[args.command]
        return handler(args, cfg)
    except (ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return 1
    except (NumericalError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
