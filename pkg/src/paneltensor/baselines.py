"""Comparison estimators: negative-binomial log-linear models fit by Fisher
scoring with maximum-likelihood dispersion, and single-layer matrix-completion
variants of the tensor pipeline.

Model variants
--------------
LL1   unit effects + period effects + covariates, offset log(exposure).
LL2   LL1 plus the log of each control outcome as an extra covariate.
LL3   joint fit of the primary outcome and all controls as negative-binomial
      outcomes sharing unit effects, covariate coefficients and dispersion;
      each control gets its own per-period offsets in place of the primary's
      period effects.
MC1   nuclear-norm completion of the primary layer alone (plus covariates).
MC2   MC1 with the transformed controls added as unit-time covariates.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.special import gammaln
from scipy.stats import norm
from sklearn.base import BaseEstimator

from .causal import impute_counterfactuals
from .panel import Diagnostics, PanelDataset
from .solver import SolverConfig
from .validation import check_matrix

__all__ = [
    "NBModelSpec",
    "NBFit",
    "NegativeBinomialGLM",
    "fit_nb",
    "impute_nb",
    "delta_method_interval",
    "as_completion_dataset",
    "matrix_completion_baseline",
]

_PHI_FLOOR = 1e-10
_PHI_CEIL = 1e6


def _nb_loglik(y: np.ndarray, mu: np.ndarray, phi: float) -> float:
    if phi <= _PHI_FLOOR:
        return float(np.sum(y * np.log(mu) - mu - gammaln(y + 1.0)))
    r = 1.0 / phi
    return float(
        np.sum(
            gammaln(y + r) - gammaln(r) - gammaln(y + 1.0)
            + r * np.log(r / (r + mu)) + y * np.log(mu / (r + mu))
        )
    )


@dataclass(frozen=True)
class NBModelSpec:
    """Which log-linear variant to fit and how."""

    variant: str = "LL1"
    include_controls_as_covariates: Optional[bool] = None
    shared_dispersion: bool = True

    def __post_init__(self):
        if self.variant not in ("LL1", "LL2", "LL3"):
            raise ValueError(f"variant must be LL1, LL2 or LL3, got {self.variant!r}")
        if self.include_controls_as_covariates is None:
            object.__setattr__(self, "include_controls_as_covariates", self.variant == "LL2")


class _PanelDesign:
    """Design-matrix builder for the log-linear variants.

    Reference levels (first unit, first period) are dropped; every row carries
    the log of the unit's exposure as an offset. LL3 stacks control rows under
    the primary rows with per-control, per-period offset columns.
    """

    def __init__(self, data: PanelDataset, spec: NBModelSpec):
        self.spec = spec
        self.n = data.n_units
        self.t = data.n_periods
        self.cov_names = list(data.covariates.keys())
        self.covariates = [data.covariates[c] for c in self.cov_names]
        self.log_off = np.log(data.offsets)
        self.n_controls = len(data.controls) if spec.variant == "LL3" else 0
        self.log_controls: List[np.ndarray] = []
        if spec.variant == "LL2":
            for k, z in enumerate(data.controls):
                if np.any(z == 0):
                    warnings.warn(
                        f"control outcome {k} has zero values; shifting them to 1 before log",
                        RuntimeWarning,
                    )
                self.log_controls.append(np.log(np.where(z == 0, 1.0, z)))
        self.column_names = self._column_names()

    def _column_names(self) -> List[str]:
        names = ["intercept"]
        names += [f"unit_{i}" for i in range(1, self.n)]
        names += [f"period_{t}" for t in range(1, self.t)]
        names += [f"cov_{c}" for c in self.cov_names]
        names += [f"log_control_{k}" for k in range(len(self.log_controls))]
        for k in range(self.n_controls):
            names += [f"control{k}_period_{t}" for t in range(self.t)]
        return names

    @property
    def n_params(self) -> int:
        return len(self.column_names)

    def primary_rows(self, cells: np.ndarray) -> np.ndarray:
        """Design rows for primary-outcome cells, one per (unit, period) pair."""
        m = len(cells)
        x = np.zeros((m, self.n_params))
        x[:, 0] = 1.0
        for r, (i, t) in enumerate(cells):
            if i >= 1:
                x[r, i] = 1.0  # unit_i sits at column index i
            if t >= 1:
                x[r, self.n - 1 + t] = 1.0
        base = 1 + (self.n - 1) + (self.t - 1)
        for p, cov in enumerate(self.covariates):
            vals = cov[cells[:, 0], cells[:, 1]]
            if np.any(~np.isfinite(vals)):
                raise ValueError(f"covariate {self.cov_names[p]!r} missing at a requested cell")
            x[:, base + p] = vals
        for k, lz in enumerate(self.log_controls):
            x[:, base + len(self.covariates) + k] = lz[cells[:, 0], cells[:, 1]]
        return x

    def control_rows(self, k: int, cells: np.ndarray) -> np.ndarray:
        """Design rows for cells of control outcome ``k`` (joint LL3 fit only)."""
        m = len(cells)
        x = np.zeros((m, self.n_params))
        x[:, 0] = 1.0
        for r, (i, t) in enumerate(cells):
            if i >= 1:
                x[r, i] = 1.0
        base = 1 + (self.n - 1) + (self.t - 1)
        for p, cov in enumerate(self.covariates):
            x[:, base + p] = cov[cells[:, 0], cells[:, 1]]
        tau0 = base + len(self.covariates) + len(self.log_controls) + k * self.t
        for r, (_, t) in enumerate(cells):
            x[r, tau0 + t] = 1.0
        return x

    def offsets_for(self, cells: np.ndarray) -> np.ndarray:
        return self.log_off[cells[:, 0]]


@dataclass
class NBFit:
    """Fitted negative-binomial log-linear model."""

    coefficients: np.ndarray
    phi_hat: float
    covariance: np.ndarray
    log_lik: float
    converged: bool
    poisson_limit: bool = False
    loglik_trace: List[float] = field(default_factory=list)
    design: Optional[_PanelDesign] = None
    column_names: List[str] = field(default_factory=list)

    def score(self, x: np.ndarray, y: np.ndarray, offset: np.ndarray) -> np.ndarray:
        """Score vector of the coefficients at the fit (offset-adjusted)."""
        mu = np.exp(x @ self.coefficients + offset)
        return x.T @ ((y - mu) / (1.0 + self.phi_hat * mu))


class NegativeBinomialGLM(BaseEstimator):
    """Log-link negative-binomial regression with estimated dispersion.

    Coefficients are updated by Fisher scoring given the dispersion, the
    dispersion by a bounded one-dimensional likelihood maximization given the
    coefficients, alternating until the joint log-likelihood is stationary.
    Variance function: mean + dispersion * mean^2.

    Parameters
    ----------
    tol : float
        Stop when the joint log-likelihood changes by less than this.
    max_outer : int
        Maximum alternations; the fit is returned with ``converged_=False``
        beyond it.
    phi : float, optional
        Fix the dispersion instead of estimating it.
    """

    def __init__(self, tol: float = 1e-8, max_outer: int = 200, phi: Optional[float] = None):
        self.tol = tol
        self.max_outer = max_outer
        self.phi = phi

    def fit(self, X, y, offset=None):
        x = check_matrix(X, "X")
        y = np.asarray(y, dtype=float).ravel()
        if y.size != x.shape[0]:
            raise ValueError("X and y have incompatible shapes")
        if np.any(y < 0) or not np.all(np.isfinite(y)):
            raise ValueError("y must contain finite nonnegative counts")
        off = np.zeros(y.size) if offset is None else np.asarray(offset, dtype=float).ravel()
        if np.linalg.matrix_rank(x) < x.shape[1]:
            raise ValueError("design matrix is rank deficient")

        beta = np.zeros(x.shape[1])
        base_mean = max(float(np.mean(y / np.exp(off))), 1e-9)
        beta[0] = np.log(base_mean) if np.allclose(x[:, 0], 1.0) else 0.0

        if self.phi is not None:
            phi = float(self.phi)
        else:
            mu0 = np.exp(np.clip(x @ beta + off, -30, 30))
            over = float(np.mean((y - mu0) ** 2 - mu0)) / max(float(np.mean(mu0**2)), 1e-12)
            phi = min(max(over, 1e-4), 1e3)

        beta = self._scoring(x, y, off, beta, phi)
        ll = _nb_loglik(y, np.exp(np.clip(x @ beta + off, -30, 30)), phi)
        trace = [ll]
        converged = False
        for _ in range(self.max_outer):
            if self.phi is None:
                phi_new = self._update_phi(x, y, off, beta, phi)
                ll_phi = _nb_loglik(y, np.exp(np.clip(x @ beta + off, -30, 30)), phi_new)
                if ll_phi >= ll:
                    phi, ll = phi_new, ll_phi
            beta_new = self._scoring(x, y, off, beta, phi)
            ll_new = _nb_loglik(y, np.exp(np.clip(x @ beta_new + off, -30, 30)), phi)
            if ll_new >= ll:
                beta, ll = beta_new, ll_new
            trace.append(ll)
            if abs(trace[-1] - trace[-2]) < self.tol:
                converged = True
                break

        poisson_limit = False
        if self.phi is None and phi <= 10 * _PHI_FLOOR:
            poisson_limit = True
            phi = _PHI_FLOOR
            beta = self._scoring(x, y, off, beta, 0.0)
            ll = _nb_loglik(y, np.exp(np.clip(x @ beta + off, -30, 30)), 0.0)
            trace.append(ll)

        mu = np.exp(np.clip(x @ beta + off, -30, 30))
        info_w = mu * (1.0 + phi * y) / (1.0 + phi * mu) ** 2
        info = x.T @ (x * info_w[:, None])
        try:
            cov = np.linalg.inv(info)
        except np.linalg.LinAlgError:
            warnings.warn("observed information is singular; covariance via pseudoinverse",
                          RuntimeWarning)
            cov = np.linalg.pinv(info)

        self.coef_ = beta
        self.dispersion_ = float(phi)
        self.covariance_ = cov
        self.loglik_ = float(ll)
        self.converged_ = converged
        self.poisson_limit_ = poisson_limit
        self.loglik_trace_ = trace
        return self

    def predict(self, X, offset=None):
        x = check_matrix(X, "X")
        off = np.zeros(x.shape[0]) if offset is None else np.asarray(offset, dtype=float).ravel()
        return np.exp(np.clip(x @ self.coef_ + off, -30, 30))

    @staticmethod
    def _scoring(x, y, off, beta, phi, max_iter=100, step_tol=1e-12):
        """Fisher scoring (IRLS) for the coefficients at fixed dispersion."""
        for _ in range(max_iter):
            eta = np.clip(x @ beta + off, -30, 30)
            mu = np.exp(eta)
            w = mu / (1.0 + phi * mu)
            z = (eta - off) + (y - mu) / mu
            sw = np.sqrt(w)
            beta_new, *_ = np.linalg.lstsq(x * sw[:, None], z * sw, rcond=None)
            step = float(np.max(np.abs(beta_new - beta)))
            beta = beta_new
            if step < step_tol:
                break
        return beta

    @staticmethod
    def _update_phi(x, y, off, beta, phi0):
        mu = np.exp(np.clip(x @ beta + off, -30, 30))

        def neg_ll(log_phi):
            return -_nb_loglik(y, mu, float(np.exp(log_phi)))

        res = minimize_scalar(
            neg_ll,
            bounds=(np.log(_PHI_FLOOR), np.log(_PHI_CEIL)),
            method="bounded",
            options={"xatol": 1e-12},
        )
        return float(np.exp(res.x))


def fit_nb(data: PanelDataset, spec: NBModelSpec) -> NBFit:
    """Fit a log-linear variant to the observed untreated cells of a panel.

    LL3 maximizes one joint likelihood over the primary and control outcomes
    with shared unit effects, covariate coefficients and dispersion.
    """
    design = _PanelDesign(data, spec)
    obs = data.w == 0
    if data.y_missing is not None:
        obs &= ~data.y_missing
    cells = np.argwhere(obs)
    if len(cells) == 0:
        raise ValueError("no observed untreated cells to fit on")
    y = data.y_obs[cells[:, 0], cells[:, 1]]
    x = design.primary_rows(cells)
    off = design.offsets_for(cells)

    if spec.variant == "LL3":
        xs, ys, offs = [x], [y], [off]
        for k, z in enumerate(data.controls):
            mask = None if data.control_masks is None else data.control_masks[k]
            zcells = np.argwhere(~mask) if mask is not None else np.argwhere(np.ones_like(obs))
            xs.append(design.control_rows(k, zcells))
            ys.append(z[zcells[:, 0], zcells[:, 1]])
            offs.append(design.offsets_for(zcells))
        x = np.vstack(xs)
        y = np.concatenate(ys)
        off = np.concatenate(offs)

    if np.any(y < 0):
        raise ValueError("outcome counts must be nonnegative")

    glm = NegativeBinomialGLM().fit(x, y, offset=off)
    return NBFit(
        coefficients=glm.coef_,
        phi_hat=glm.dispersion_,
        covariance=glm.covariance_,
        log_lik=glm.loglik_,
        converged=glm.converged_,
        poisson_limit=glm.poisson_limit_,
        loglik_trace=glm.loglik_trace_,
        design=design,
        column_names=design.column_names,
    )


def impute_nb(fit: NBFit, cells) -> np.ndarray:
    """Conditional-expectation imputations exp(mu) at primary-outcome cells."""
    cells = np.asarray(cells, dtype=int).reshape(-1, 2)
    x = fit.design.primary_rows(cells)
    off = fit.design.offsets_for(cells)
    return np.exp(np.clip(x @ fit.coefficients + off, -30, 30))


def _delta_and_gradient(fit: NBFit, data: PanelDataset):
    treated = np.argwhere(data.w == 1)
    y1 = data.y_obs[treated[:, 0], treated[:, 1]]
    keep = y1 > 0
    treated, y1 = treated[keep], y1[keep]
    if len(treated) == 0:
        raise ValueError("no treated cells with positive observed outcome")
    x = fit.design.primary_rows(treated)
    off = fit.design.offsets_for(treated)
    mu = np.exp(np.clip(x @ fit.coefficients + off, -30, 30))
    delta = float(np.mean((mu - y1) / y1))
    grad = (x * (mu / y1)[:, None]).mean(axis=0)
    return delta, grad


def delta_method_interval(fit: NBFit, data: PanelDataset) -> Tuple[float, float]:
    """Normal-approximation 95% interval for the average relative effect.

    Propagates the coefficient covariance through the gradient of the plug-in
    effect functional. A singular covariance is flagged with a warning.
    """
    delta, grad = _delta_and_gradient(fit, data)
    cov = fit.covariance
    var = float(grad @ cov @ grad)
    if not np.isfinite(var) or var < 0:
        warnings.warn("coefficient covariance unusable; interval unreliable", RuntimeWarning)
        var = abs(var)
    half = norm.ppf(0.975) * np.sqrt(max(var, 0.0))
    return delta - half, delta + half


def as_completion_dataset(data: PanelDataset, variant: str) -> PanelDataset:
    """Derive the single-layer dataset a matrix-completion baseline runs on.

    MC1 drops the control layers; MC2 additionally re-enters each control as a
    unit-time covariate on the dataset's transform scale.
    """
    if variant not in ("MC1", "MC2"):
        raise ValueError(f"variant must be MC1 or MC2, got {variant!r}")
    cov = dict(data.covariates)
    if variant == "MC2":
        for k, z in enumerate(data.controls):
            cov[f"control_{k}"] = data.apply_transform(z)
    return PanelDataset(
        y_obs=data.y_obs,
        w=data.w,
        controls=[],
        control_masks=None,
        covariates=cov,
        offsets=data.offsets,
        transform=data.transform,
        y_missing=data.y_missing,
    )


def matrix_completion_baseline(
    data: PanelDataset,
    variant: str,
    cfg: SolverConfig,
    cv_folds: Optional[int] = None,
    cv_seed: int = 0,
) -> Tuple[np.ndarray, Diagnostics]:
    """Run a single-layer completion baseline; same contract as the tensor path."""
    derived = as_completion_dataset(data, variant)
    return impute_counterfactuals(derived, cfg, cv_folds=cv_folds, cv_seed=cv_seed)
