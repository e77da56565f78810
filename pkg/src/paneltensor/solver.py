"""Masked nuclear-norm matrix completion by iterated singular-value thresholding.

The solver minimizes

    F(theta) = 1/2 * sum_{(i,j) observed} (y_ij - theta_ij)^2 + lam * ||theta||_*

over dense matrices, where ``||.||_*`` is the nuclear norm (sum of singular
values). The algorithm alternates filling the unobserved entries with the
current estimate and applying the singular-value shrinkage operator; each sweep
is a majorize-minimize step, so the objective never increases.

Optional behaviours, all off by default so the bare program above is what runs:

* ``continuation`` - solve along a decreasing log-spaced path of thresholds,
  warm-starting each solve; required for near-noiseless recovery at tiny ``lam``.
* ``center`` - remove row/column means of the observed entries first (alternating
  means, unpenalized) and restore them afterwards. Keeps the shrinkage away from
  the overall level of the matrix.
* ``debias`` - after convergence, refit the singular values of the solution by
  least squares on the observed entries, keeping the singular vectors. Undoes
  the multiplicative bias of the shrinkage without changing the recovered
  subspace.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse.linalg
from sklearn.base import BaseEstimator, TransformerMixin

from .validation import check_matrix

__all__ = [
    "MaskedMatrix",
    "SolverConfig",
    "CovariateModel",
    "CompletionFit",
    "NumericalError",
    "SoftImpute",
    "svt",
    "complete",
    "complete_with_covariates",
    "cross_validate_lambda",
    "observed_operator_norm",
    "default_lambda_grid",
]


class NumericalError(RuntimeError):
    """Raised when a numerical routine (e.g. the SVD) fails to produce a result."""


@dataclass(frozen=True)
class MaskedMatrix:
    """Dense matrix together with the boolean mask of observed entries.

    Values at unobserved positions are carried but ignored by every operation.
    """

    values: np.ndarray
    observed: np.ndarray

    def __post_init__(self):
        vals = np.array(self.values, dtype=float, copy=True)
        obs = np.array(self.observed, dtype=bool, copy=True)
        if vals.ndim != 2:
            raise ValueError("values must be a matrix")
        if obs.shape != vals.shape:
            raise ValueError(
                f"observed mask shape {obs.shape} does not match values shape {vals.shape}"
            )
        vals.flags.writeable = False
        obs.flags.writeable = False
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "observed", obs)

    @classmethod
    def from_dense(cls, x) -> "MaskedMatrix":
        """Build from a matrix whose missing entries are NaN."""
        arr = check_matrix(x, "x", allow_nan=True)
        obs = ~np.isnan(arr)
        vals = np.where(obs, arr, 0.0)
        return cls(values=vals, observed=obs)

    def to_dense(self) -> np.ndarray:
        """Matrix with NaN at unobserved entries."""
        return np.where(self.observed, self.values, np.nan)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    @property
    def n_observed(self) -> int:
        return int(self.observed.sum())

    def observed_indices(self) -> np.ndarray:
        """Observed (row, col) pairs in row-major order."""
        return np.argwhere(self.observed)

    def drop(self, idx: np.ndarray) -> "MaskedMatrix":
        """Copy with the given (row, col) pairs marked unobserved."""
        obs = self.observed.copy()
        obs[idx[:, 0], idx[:, 1]] = False
        return MaskedMatrix(values=self.values, observed=obs)


@dataclass(frozen=True)
class SolverConfig:
    """Configuration for the completion solver.

    ``lam`` is the nuclear-norm weight. ``tol`` is the relative objective-change
    stopping rule; ``converged`` in the fit reports whether it was met within
    ``max_iters``. ``svd_rank_cap`` switches to a truncated SVD of that rank.
    """

    lam: float = 0.0
    max_iters: int = 500
    tol: float = 1e-7
    svd_rank_cap: Optional[int] = None
    continuation: bool = False
    continuation_steps: int = 10
    center: bool = False
    debias: bool = False

    def __post_init__(self):
        if not (self.lam >= 0.0 and np.isfinite(self.lam)):
            raise ValueError(f"lam must be a finite nonnegative number, got {self.lam}")
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if self.svd_rank_cap is not None and self.svd_rank_cap < 1:
            raise ValueError("svd_rank_cap must be at least 1 when set")


@dataclass
class CovariateModel:
    """Covariate blocks for completion with a structured mean component.

    The fitted mean is ``theta + X_N @ B @ X_T + sum_j coef_j * U_j`` where any
    absent block acts as the identity. ``B_hat`` and ``unit_time_coefs`` are
    populated by the fit.
    """

    X_N: Optional[np.ndarray] = None  # units x d_N
    X_T: Optional[np.ndarray] = None  # d_T x periods
    unit_time_covariates: List[np.ndarray] = field(default_factory=list)
    B_hat: Optional[np.ndarray] = None
    unit_time_coefs: Optional[np.ndarray] = None

    def is_empty(self) -> bool:
        return self.X_N is None and self.X_T is None and not self.unit_time_covariates


@dataclass
class CompletionFit:
    """Result of a completion solve.

    ``theta_hat`` contains the model value at every cell (imputations at the
    unobserved ones). ``objective_trace`` is the per-sweep objective of the
    program actually iterated (the centered residual program when centering is
    on); it is nonincreasing. ``rank_hat`` is the numerical rank of
    ``theta_hat`` at tolerance ``1e-8 * sigma_1``.
    """

    theta_hat: np.ndarray
    objective_trace: List[float]
    rank_hat: int
    iterations: int
    converged: bool
    covariates: Optional[CovariateModel] = None
    covariate_rank_deficient: bool = False


def _svd(m: np.ndarray, rank_cap: Optional[int]):
    """Full or truncated SVD with failure wrapped in NumericalError."""
    try:
        if rank_cap is not None and rank_cap < min(m.shape) - 1:
            k = rank_cap
            # deterministic start vector so repeated runs agree exactly
            v0 = np.ones(min(m.shape))
            u, s, vt = scipy.sparse.linalg.svds(m, k=k, v0=v0)
            order = np.argsort(s)[::-1]
            return u[:, order], s[order], vt[order]
        u, s, vt = np.linalg.svd(m, full_matrices=False)
        if rank_cap is not None:
            u, s, vt = u[:, :rank_cap], s[:rank_cap], vt[:rank_cap]
        return u, s, vt
    except np.linalg.LinAlgError as exc:  # pragma: no cover - numpy SVD rarely fails
        raise NumericalError(f"SVD failed on a {m.shape} matrix: {exc}") from exc


def svt(m: np.ndarray, lam: float, rank_cap: Optional[int] = None) -> np.ndarray:
    """Singular-value soft-thresholding.

    Returns ``U @ diag(max(s - lam, 0)) @ Vt``, the exact minimizer of
    ``1/2 ||X - m||_F^2 + lam ||X||_*``.
    """
    m = check_matrix(m, "m")
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    u, s, vt = _svd(m, rank_cap)
    shrunk = np.maximum(s - lam, 0.0)
    return (u * shrunk) @ vt


def observed_operator_norm(y: MaskedMatrix) -> float:
    """Operator norm of the observed-entry matrix with zeros filled in."""
    zf = np.where(y.observed, y.values, 0.0)
    return float(np.linalg.svd(zf, compute_uv=False)[0])


def default_lambda_grid(y: MaskedMatrix, n: int = 20, floor: float = 1e-3) -> np.ndarray:
    """Log-spaced grid on [floor, 1] times the observed operator norm, descending."""
    top = observed_operator_norm(y)
    if top == 0.0:
        return np.zeros(1)
    return np.geomspace(top, top * floor, n)


def _alternating_means(values, observed, row, col, passes=30, tol=1e-12):
    """Alternating row/column means of the observed residual; empty lines get 0."""
    rowcnt = observed.sum(axis=1)
    colcnt = observed.sum(axis=0)
    for _ in range(passes):
        resid = np.where(observed, values - row[:, None] - col[None, :], 0.0)
        dr = np.divide(resid.sum(axis=1), rowcnt, out=np.zeros_like(row), where=rowcnt > 0)
        row = row + dr
        resid = np.where(observed, values - row[:, None] - col[None, :], 0.0)
        dc = np.divide(resid.sum(axis=0), colcnt, out=np.zeros_like(col), where=colcnt > 0)
        col = col + dc
        if max(np.abs(dr).max(initial=0.0), np.abs(dc).max(initial=0.0)) < tol:
            break
    return row, col


def _soft_impute(values, observed, lam, x0, cfg: SolverConfig):
    """Iterate impute-then-shrink at a fixed threshold from a warm start.

    Returns (x, trace, iterations, converged). The trace holds the objective
    after each sweep, preceded by the objective at the warm start.
    """
    x = x0
    obj_prev = _objective(values, observed, lam, x, None)
    trace = [obj_prev]
    converged = False
    it = 0
    for it in range(1, cfg.max_iters + 1):
        filled = np.where(observed, values, x)
        u, s, vt = _svd(filled, cfg.svd_rank_cap)
        shrunk = np.maximum(s - lam, 0.0)
        x = (u * shrunk) @ vt
        obj = 0.5 * float(np.sum((values[observed] - x[observed]) ** 2)) + lam * float(shrunk.sum())
        trace.append(obj)
        if abs(obj_prev - obj) <= cfg.tol * max(1.0, abs(obj_prev)):
            converged = True
            break
        obj_prev = obj
    return x, trace, it, converged


def _objective(values, observed, lam, x, shrunk_s):
    fit = 0.5 * float(np.sum((values[observed] - x[observed]) ** 2))
    if shrunk_s is None:
        nuc = float(np.linalg.svd(x, compute_uv=False).sum()) if lam > 0 else 0.0
    else:
        nuc = float(shrunk_s.sum())
    return fit + lam * nuc


def _debias(x, values, observed):
    """Least-squares refit of the singular values on the observed entries."""
    u, s, vt = np.linalg.svd(x, full_matrices=False)
    top = s[0] if s.size else 0.0
    r = int(np.sum(s > 1e-8 * max(top, np.finfo(float).tiny)))
    if r == 0:
        return x
    u, vt = u[:, :r], vt[:r]
    basis = np.stack([np.outer(u[:, j], vt[j])[observed] for j in range(r)], axis=1)
    d, *_ = np.linalg.lstsq(basis, values[observed], rcond=None)
    return (u * d) @ vt


def _numerical_rank(m: np.ndarray) -> int:
    s = np.linalg.svd(m, compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.sum(s > 1e-8 * s[0]))


def _lambda_path(y: MaskedMatrix, lam: float, cfg: SolverConfig) -> np.ndarray:
    if not cfg.continuation:
        return np.array([lam])
    top = observed_operator_norm(y)
    if top <= 0 or lam >= top:
        return np.array([lam])
    lo = max(lam, top * 1e-12)
    path = np.geomspace(top, lo, max(cfg.continuation_steps, 2))
    path[-1] = lam
    return path


def complete(y: MaskedMatrix, cfg: SolverConfig) -> CompletionFit:
    """Complete a masked matrix by nuclear-norm-regularized soft-imputation.

    Raises ValueError when no entry is observed or an observed value is not
    finite. Fully unobserved rows/columns are legal; their entries come from
    the low-rank extrapolation.
    """
    if y.n_observed == 0:
        raise ValueError("masked matrix has no observed entries")
    if not np.all(np.isfinite(y.values[y.observed])):
        raise ValueError("observed entries must be finite")

    values = y.values
    observed = y.observed

    # exact shortcut: fully observed and unregularized
    if cfg.lam == 0.0 and y.n_observed == values.size and not cfg.center:
        return CompletionFit(
            theta_hat=values.copy(),
            objective_trace=[0.0],
            rank_hat=_numerical_rank(values),
            iterations=1,
            converged=True,
        )

    row = np.zeros(values.shape[0])
    col = np.zeros(values.shape[1])
    if cfg.center:
        row, col = _alternating_means(values, observed, row, col)
    resid = values - row[:, None] - col[None, :]

    x = np.zeros_like(values)
    path = _lambda_path(y, cfg.lam, cfg)
    for lam_k in path[:-1]:
        x, _, _, _ = _soft_impute(resid, observed, lam_k, x, cfg)
    x, trace, iters, converged = _soft_impute(resid, observed, path[-1], x, cfg)

    if cfg.debias:
        x = _debias(x, resid, observed)

    theta = x + row[:, None] + col[None, :]
    return CompletionFit(
        theta_hat=theta,
        objective_trace=trace,
        rank_hat=_numerical_rank(theta),
        iterations=iters,
        converged=converged,
    )


def _covariate_design(cov: CovariateModel, shape: Tuple[int, int]) -> Tuple[np.ndarray, int]:
    """Stack the covariate component as (rows*cols, n_params) in cell-major order.

    Returns the design reshaped to (rows, cols, n_params) and the number of
    parameters in the bilinear block (the rest are unit-time coefficients).
    """
    n, t = shape
    blocks = []
    n_bilinear = 0
    if cov.X_N is not None or cov.X_T is not None:
        xn = np.eye(n) if cov.X_N is None else np.asarray(cov.X_N, dtype=float)
        xt = np.eye(t) if cov.X_T is None else np.asarray(cov.X_T, dtype=float)
        if xn.shape[0] != n:
            raise ValueError(f"X_N must have {n} rows, got {xn.shape[0]}")
        if xt.shape[1] != t:
            raise ValueError(f"X_T must have {t} columns, got {xt.shape[1]}")
        # feature (a, b) has cell value X_N[i, a] * X_T[b, t]
        block = np.einsum("ia,bt->itab", xn, xt).reshape(n, t, -1)
        n_bilinear = block.shape[2]
        blocks.append(block)
    for u in cov.unit_time_covariates:
        u = check_matrix(u, "unit_time covariate")
        if u.shape != (n, t):
            raise ValueError(f"unit-time covariate must have shape {(n, t)}, got {u.shape}")
        blocks.append(u[:, :, None])
    design = np.concatenate(blocks, axis=2)
    return design, n_bilinear


def _cov_alternation(values, observed, design, dmat, lam, cfg, state=None, path=None):
    """One full alternating solve at threshold ``lam`` from an optional warm state.

    ``state`` is ``(x, row, col)``; ``path`` triggers a continuation sweep of
    the low-rank block before the first coefficient re-fit. Returns the new
    state, coefficients, joint-objective trace, outer count and convergence.
    """
    if state is None:
        x = np.zeros_like(values)
        row = np.zeros(values.shape[0])
        col = np.zeros(values.shape[1])
    else:
        x, row, col = state
    beta = np.zeros(dmat.shape[1])
    trace: List[float] = []
    obj_prev: Optional[float] = None
    converged = False
    outer = 0
    for outer in range(1, cfg.max_iters + 1):
        # coefficients given the structural part, exact LS on observed cells
        target = (values - x - row[:, None] - col[None, :])[observed]
        beta, *_ = np.linalg.lstsq(dmat, target, rcond=None)
        cov_part = design @ beta
        resid_full = values - cov_part
        # means given coefficients and low-rank part
        if cfg.center:
            row, col = _alternating_means(resid_full - x, observed, row, col)
        resid = resid_full - row[:, None] - col[None, :]
        # low-rank part given the rest (warm-started continuation on first pass)
        if outer == 1 and path is not None:
            for lam_k in path[:-1]:
                x, _, _, _ = _soft_impute(resid, observed, lam_k, x, cfg)
        x, _, _, _ = _soft_impute(resid, observed, lam, x, cfg)
        nuc = float(np.linalg.svd(x, compute_uv=False).sum())
        fitpart = 0.5 * float(
            np.sum((values[observed] - (x + row[:, None] + col[None, :] + cov_part)[observed]) ** 2)
        )
        obj = fitpart + lam * nuc
        trace.append(obj)
        if obj_prev is not None and abs(obj_prev - obj) <= cfg.tol * max(1.0, abs(obj_prev)):
            converged = True
            break
        obj_prev = obj
    return (x, row, col), beta, trace, outer, converged


def complete_with_covariates(
    y: MaskedMatrix, cov: CovariateModel, cfg: SolverConfig
) -> CompletionFit:
    """Jointly fit the low-rank part and covariate coefficients.

    Alternates an exact least-squares update of the coefficients on the
    observed residuals with soft-impute sweeps on the covariate-adjusted
    matrix; the joint objective is nonincreasing. With an empty covariate
    model this is exactly :func:`complete`.
    """
    if cov is None or cov.is_empty():
        return complete(y, cfg)
    if y.n_observed == 0:
        raise ValueError("masked matrix has no observed entries")
    if not np.all(np.isfinite(y.values[y.observed])):
        raise ValueError("observed entries must be finite")

    values, observed = y.values, y.observed
    design, n_bilinear = _covariate_design(cov, y.shape)
    dmat = design[observed]  # (n_obs, n_params)
    n_params = dmat.shape[1]
    rank_deficient = np.linalg.matrix_rank(dmat) < n_params
    if rank_deficient:
        warnings.warn(
            "covariate design is rank deficient; coefficients are the minimum-norm solution",
            RuntimeWarning,
        )

    path = _lambda_path(y, cfg.lam, cfg)
    (x, row, col), beta, trace, outer, converged = _cov_alternation(
        values, observed, design, dmat, cfg.lam, cfg, path=path
    )

    if cfg.debias:
        x = _debias(x, values - design @ beta - row[:, None] - col[None, :], observed)

    cov_part = design @ beta
    theta = x + row[:, None] + col[None, :] + cov_part

    fitted_cov = CovariateModel(
        X_N=cov.X_N,
        X_T=cov.X_T,
        unit_time_covariates=list(cov.unit_time_covariates),
    )
    if n_bilinear:
        xn_cols = (np.eye(y.rows) if cov.X_N is None else np.asarray(cov.X_N)).shape[1]
        xt_rows = (np.eye(y.cols) if cov.X_T is None else np.asarray(cov.X_T)).shape[0]
        fitted_cov.B_hat = beta[:n_bilinear].reshape(xn_cols, xt_rows)
    if cov.unit_time_covariates:
        fitted_cov.unit_time_coefs = beta[n_bilinear:].copy()

    return CompletionFit(
        theta_hat=theta,
        objective_trace=trace,
        rank_hat=_numerical_rank(theta),
        iterations=outer,
        converged=converged,
        covariates=fitted_cov,
        covariate_rank_deficient=bool(rank_deficient),
    )


def cross_validate_lambda(
    y: MaskedMatrix,
    grid: Sequence[float],
    folds: int,
    seed: int,
    cfg: Optional[SolverConfig] = None,
    eligible: Optional[np.ndarray] = None,
    covariates: Optional[CovariateModel] = None,
) -> Tuple[float, List[Tuple[float, float]]]:
    """Pick the threshold minimizing mean held-out squared error.

    The observed entries (optionally restricted to the boolean ``eligible``
    mask) are partitioned into ``folds`` groups by a seeded shuffle; for each
    threshold the held-out squared error of completing the reduced mask is
    averaged across folds. Ties go to the larger threshold. ``folds`` equal to
    the number of eligible entries gives leave-one-out. A covariate model, when
    given, is refit inside every fold.

    Without covariates each fold is solved once along the descending grid with
    warm starts; the objective is convex, so the path solutions match
    independent solves at the stopping tolerance.
    """
    grid = [float(g) for g in grid]
    if len(grid) == 0:
        raise ValueError("grid must be nonempty")
    if any(g < 0 or not np.isfinite(g) for g in grid):
        raise ValueError("grid values must be finite and nonnegative")
    if cfg is None:
        cfg = SolverConfig()
    if covariates is not None and covariates.is_empty():
        covariates = None

    elig_mask = y.observed if eligible is None else (y.observed & np.asarray(eligible, dtype=bool))
    idx = np.argwhere(elig_mask)
    n_elig = len(idx)
    if n_elig == 0:
        raise ValueError("no eligible observed entries to hold out")
    if folds < 2 or folds > n_elig:
        raise ValueError(f"folds must be in [2, {n_elig}], got {folds}")

    rng = np.random.default_rng(seed)
    order = rng.permutation(n_elig)
    fold_of = np.empty(n_elig, dtype=int)
    fold_of[order] = np.arange(n_elig) % folds

    lams = np.sort(np.unique(grid))[::-1]
    sq_sums = np.zeros(len(lams))
    counts = np.zeros(len(lams))
    for f in range(folds):
        hold = idx[fold_of == f]
        if len(hold) == 0:
            continue
        reduced = y.drop(hold)
        if reduced.n_observed == 0:
            continue
        truth = y.values[hold[:, 0], hold[:, 1]]
        if covariates is not None:
            design, _ = _covariate_design(covariates, y.shape)
            dmat = design[reduced.observed]
            state = None
            for li, lam_k in enumerate(lams):
                state, beta_k, _, _, _ = _cov_alternation(
                    reduced.values, reduced.observed, design, dmat, lam_k, cfg, state=state
                )
                xk, rowk, colk = state
                pred_x = (_debias(xk, reduced.values - design @ beta_k
                                  - rowk[:, None] - colk[None, :], reduced.observed)
                          if cfg.debias else xk)
                theta_k = pred_x + rowk[:, None] + colk[None, :] + design @ beta_k
                pred = theta_k[hold[:, 0], hold[:, 1]]
                sq_sums[li] += float(np.sum((pred - truth) ** 2))
                counts[li] += len(hold)
            continue
        row = np.zeros(y.rows)
        col = np.zeros(y.cols)
        if cfg.center:
            row, col = _alternating_means(reduced.values, reduced.observed, row, col)
        resid = reduced.values - row[:, None] - col[None, :]
        x = np.zeros_like(resid)
        for li, lam_k in enumerate(lams):
            x, _, _, _ = _soft_impute(resid, reduced.observed, lam_k, x, cfg)
            pred_x = _debias(x, resid, reduced.observed) if cfg.debias else x
            pred = (pred_x + row[:, None] + col[None, :])[hold[:, 0], hold[:, 1]]
            sq_sums[li] += float(np.sum((pred - truth) ** 2))
            counts[li] += len(hold)

    mse = sq_sums / np.maximum(counts, 1)
    best = 0
    for li in range(len(lams)):
        if mse[li] < mse[best]:
            best = li
    # lams are descending, so the first index attaining the minimum is the
    # largest threshold: ties already break toward larger lam
    lam_star = float(lams[best])
    table = [(float(l), float(m)) for l, m in zip(lams, mse)]
    return lam_star, table


class SoftImpute(TransformerMixin, BaseEstimator):
    """Matrix completion transformer with NaN-coded missing entries.

    ``fit(X)`` solves the nuclear-norm program on the observed entries of the
    2-d array ``X``; ``transform(X)`` returns ``X`` with every NaN replaced by
    the fitted value. Completion is transductive: transform expects the same
    shape it was fitted on.

    Parameters mirror :class:`SolverConfig`; see :func:`complete` for the
    objective and options.
    """

    def __init__(
        self,
        lam: float = 0.0,
        max_iters: int = 500,
        tol: float = 1e-7,
        svd_rank_cap: Optional[int] = None,
        continuation: bool = False,
        center: bool = False,
        debias: bool = False,
    ):
        self.lam = lam
        self.max_iters = max_iters
        self.tol = tol
        self.svd_rank_cap = svd_rank_cap
        self.continuation = continuation
        self.center = center
        self.debias = debias

    def _config(self) -> SolverConfig:
        return SolverConfig(
            lam=self.lam, max_iters=self.max_iters, tol=self.tol,
            svd_rank_cap=self.svd_rank_cap, continuation=self.continuation,
            center=self.center, debias=self.debias,
        )

    def fit(self, X, y=None):
        mm = MaskedMatrix.from_dense(X)
        fit = complete(mm, self._config())
        self.theta_ = fit.theta_hat
        self.rank_ = fit.rank_hat
        self.n_iter_ = fit.iterations
        self.converged_ = fit.converged
        self.objective_trace_ = list(fit.objective_trace)
        self.n_features_in_ = mm.cols
        return self

    def transform(self, X):
        if not hasattr(self, "theta_"):
            raise ValueError("SoftImpute instance is not fitted yet")
        arr = check_matrix(X, "X", allow_nan=True)
        if arr.shape != self.theta_.shape:
            raise ValueError(
                f"transform expects the fitted shape {self.theta_.shape}, got {arr.shape}"
            )
        return np.where(np.isnan(arr), self.theta_, arr)
