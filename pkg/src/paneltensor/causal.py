"""Counterfactual imputation and treatment-effect estimation on panel datasets.

The pipeline: assemble the outcome tensor, complete its unit-mode unfolding
under a nuclear-norm penalty, back-transform the primary layer, and average the
per-cell relative effects over treated cells. Uncertainty comes from a residual
bootstrap that permutes primary-layer residuals within periods and refits.
"""

from __future__ import annotations

from typing import Optional, Tuple

import numpy as np

from .panel import CellEffect, Diagnostics, EffectEstimate, PanelDataset, assemble_tensor
from .solver import (
    CompletionFit,
    CovariateModel,
    MaskedMatrix,
    SolverConfig,
    complete,
    complete_with_covariates,
    cross_validate_lambda,
    default_lambda_grid,
)
from .tensor import Tensor3, unfold
from .validation import check_binary_matrix, check_matrix

__all__ = [
    "panel_masked_matrix",
    "select_lambda",
    "impute_counterfactuals",
    "estimate_delta",
    "bootstrap_interval",
]


def panel_masked_matrix(d: PanelDataset) -> Tuple[MaskedMatrix, np.ndarray]:
    """Unit-mode unfolding of the outcome tensor as a masked matrix.

    Columns are ordered period-fastest, so layer ``k`` occupies the column block
    ``[k*T, (k+1)*T)``. Also returns the boolean eligibility mask selecting the
    primary-layer columns (used to target cross-validation holdouts).
    """
    tens, missing = assemble_tensor(d)
    vals = unfold(tens, 1).values
    miss = unfold(Tensor3(missing.astype(float)), 1).values > 0.5
    mm = MaskedMatrix(values=vals, observed=~miss)
    eligible = np.zeros_like(miss)
    eligible[:, : d.n_periods] = True
    return mm, eligible


def _covariate_model(d: PanelDataset) -> Optional[CovariateModel]:
    """Unit-time covariates of the panel, widened to the unfolded matrix.

    Covariates apply to the primary layer only; their columns are zero on the
    control blocks.
    """
    if not d.covariates:
        return None
    n, t, k = d.n_units, d.n_periods, d.n_outcomes
    mats = []
    for x in d.covariates.values():
        wide = np.zeros((n, t * k))
        wide[:, :t] = x
        mats.append(wide)
    return CovariateModel(unit_time_covariates=mats)


def select_lambda(
    d: PanelDataset,
    cfg: SolverConfig,
    folds: int = 20,
    seed: int = 0,
    grid: Optional[np.ndarray] = None,
):
    """Cross-validate the nuclear-norm weight on primary-layer holdouts.

    Returns ``(lambda_star, cv_table)``; the grid defaults to 20 log-spaced
    values on [1e-3, 1] times the observed operator norm.
    """
    mm, eligible = panel_masked_matrix(d)
    if grid is None:
        grid = default_lambda_grid(mm)
    n_elig = int((mm.observed & eligible).sum())
    folds = min(folds, n_elig)
    return cross_validate_lambda(
        mm, grid, folds, seed, cfg=cfg, eligible=eligible, covariates=_covariate_model(d)
    )


def impute_counterfactuals(
    d: PanelDataset,
    cfg: SolverConfig,
    cv_folds: Optional[int] = None,
    cv_seed: int = 0,
) -> Tuple[np.ndarray, Diagnostics]:
    """Impute the untreated primary outcome at every cell.

    Completes the unit-mode unfolding at ``cfg.lam`` (with covariates when the
    dataset carries them), restores the offset, and back-transforms the primary
    layer, clamping at zero. ``cv_folds`` additionally estimates out-of-sample
    MSE by holding out observed primary-layer cells and refitting.
    """
    fit, zhat = _fit_panel(d, cfg)
    t = d.n_periods
    z1 = zhat[:, :t] + d.log_offsets()[:, None]
    y0_hat = d.invert_transform(z1)

    mm, eligible = panel_masked_matrix(d)
    obs1 = mm.observed[:, :t]
    in_mse = float(np.mean((zhat[:, :t][obs1] - mm.values[:, :t][obs1]) ** 2))

    out_mse = float("nan")
    if cv_folds is not None and cv_folds >= 2:
        _, table = cross_validate_lambda(
            mm, [cfg.lam], min(cv_folds, int((mm.observed & eligible).sum())),
            cv_seed, cfg=cfg, eligible=eligible, covariates=_covariate_model(d),
        )
        out_mse = table[0][1]

    return y0_hat, Diagnostics(in_sample_mse=in_mse, out_of_sample_mse=out_mse)


def _fit_panel(d: PanelDataset, cfg: SolverConfig) -> Tuple[CompletionFit, np.ndarray]:
    """Run the completion on the panel's unfolded tensor; returns fit and fitted matrix."""
    mm, _ = panel_masked_matrix(d)
    cov = _covariate_model(d)
    if cov is None:
        fit = complete(mm, cfg)
    else:
        fit = complete_with_covariates(mm, cov, cfg)
    return fit, fit.theta_hat


def estimate_delta(y1_obs, y0_hat, w) -> EffectEstimate:
    """Average relative effect over treated cells: mean of (imputed - observed)/observed.

    Treated cells with a zero observed outcome are excluded from the average and
    counted in ``n_excluded``.
    """
    y1 = check_matrix(y1_obs, "y1_obs")
    y0 = check_matrix(y0_hat, "y0_hat")
    wm = check_binary_matrix(w, "w")
    if y1.shape != y0.shape or y1.shape != wm.shape:
        raise ValueError("y1_obs, y0_hat and w must share a shape")

    cells = []
    excluded = 0
    for i, t in np.argwhere(wm == 1):
        y1_it = y1[i, t]
        if y1_it == 0.0:
            excluded += 1
            continue
        rel = (y0[i, t] - y1_it) / y1_it
        cells.append(CellEffect(int(i), int(t), float(y1_it), float(y0[i, t]), float(rel)))
    n_treated = int(wm.sum())
    delta = float(np.mean([c.relative_effect for c in cells])) if cells else float("nan")
    return EffectEstimate(
        delta_hat=delta, n_treated=n_treated, per_cell=cells, n_excluded=excluded
    )


def bootstrap_interval(
    d: PanelDataset, cfg: SolverConfig, reps: int, seed: int
) -> Tuple[float, float, np.ndarray]:
    """Residual-bootstrap percentile interval for the average relative effect.

    Primary-layer residuals (transform scale) are permuted within each period
    among that period's observed cells, added back to the fitted values, and the
    whole completion is re-run; control layers are never touched. Periods with
    fewer than two observed primary cells keep their residuals in place.
    Returns the 2.5/97.5 percentiles and the draws.
    """
    if reps < 2:
        raise ValueError("reps must be at least 2")
    fit, zhat = _fit_panel(d, cfg)
    mm, _ = panel_masked_matrix(d)
    t = d.n_periods

    obs1 = mm.observed[:, :t]
    resid = np.where(obs1, mm.values[:, :t] - zhat[:, :t], 0.0)

    rng = np.random.default_rng(seed)
    draws = np.empty(reps)
    base_vals = mm.values.copy()
    for b in range(reps):
        r_perm = resid.copy()
        for col in range(t):
            rows = np.flatnonzero(obs1[:, col])
            if rows.size >= 2:
                r_perm[rows, col] = resid[rng.permutation(rows), col]
        new_vals = base_vals.copy()
        block = new_vals[:, :t]
        block[obs1] = zhat[:, :t][obs1] + r_perm[obs1]
        new_vals[:, :t] = block
        mm_b = MaskedMatrix(values=new_vals, observed=mm.observed)
        cov = _covariate_model(d)
        fit_b = complete(mm_b, cfg) if cov is None else complete_with_covariates(mm_b, cov, cfg)
        z1_b = fit_b.theta_hat[:, :t] + d.log_offsets()[:, None]
        y0_b = d.invert_transform(z1_b)
        draws[b] = estimate_delta(d.y_obs, y0_b, d.w).delta_hat

    lo, hi = np.percentile(draws, [2.5, 97.5])
    return float(lo), float(hi), draws
