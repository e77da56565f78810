"""Seeded generators and runners for the three benchmark data-generating
processes, the missingness mechanisms, and the method-comparison and
rate-versus-outcomes experiments.

All generators are pure functions of their seed. Negative-binomial draws use
the gamma-Poisson mixture (mean ``m``, size ``1/phi``, variance ``m + phi*m^2``)
so streams are reproducible across platforms with the same bit generator.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .baselines import (
    NBModelSpec,
    as_completion_dataset,
    fit_nb,
    impute_nb,
)
from .causal import estimate_delta, impute_counterfactuals, select_lambda
from .panel import PanelDataset
from .solver import SolverConfig

__all__ = [
    "SimScenario",
    "SimResult",
    "MethodResult",
    "generate",
    "mcar_mask",
    "mcar_within_season_mask",
    "propensity_mask",
    "run_comparison",
    "rate_experiment",
    "SIM_METHODS",
]

SIM_METHODS = ("LL1", "LL2", "LL3", "MC1", "MC2", "TC")


@dataclass(frozen=True)
class SimScenario:
    """Configuration of one benchmark data-generating process.

    ``which`` selects the process: S1 is the additive unit+period log-linear
    model, S2 adds a per-cell interaction shared with the control outcome, and
    S3 further adds a Poisson seasonal component to the primary outcome only.
    """

    which: str = "S1"
    n_units: int = 50
    n_periods: int = 8
    effect_mean: float = 4.0
    effect_sd: float = 1.0
    interaction_scale: float = 30.0
    control_shift: float = -1.0
    dispersion: float = 0.01
    seasonal_level: float = 5000.0
    treated_ratio: float = 0.9
    n_missing: int = 100
    mechanism: str = "mcar"
    seed: int = 0

    def __post_init__(self):
        if self.which not in ("S1", "S2", "S3"):
            raise ValueError(f"which must be S1, S2 or S3, got {self.which!r}")
        if self.mechanism not in ("mcar", "mcar_within_season", "propensity"):
            raise ValueError(f"unknown mechanism {self.mechanism!r}")
        if not (0 < self.n_missing <= self.n_units * self.n_periods):
            raise ValueError("n_missing must be in (0, n_units*n_periods]")
        if self.dispersion <= 0 or self.effect_sd <= 0:
            raise ValueError("dispersion and effect_sd must be positive")
        if not (0 < self.treated_ratio):
            raise ValueError("treated_ratio must be positive")


@dataclass
class MethodResult:
    """Per-replication outcomes of one method."""

    delta_hats: List[float] = field(default_factory=list)
    mse_masked: List[float] = field(default_factory=list)
    mape_per_cell: List[List[float]] = field(default_factory=list)

    @property
    def mean_delta(self) -> float:
        return float(np.mean(self.delta_hats))

    @property
    def mean_mse(self) -> float:
        return float(np.mean(self.mse_masked))


@dataclass
class SimResult:
    truth_delta: float
    per_method: Dict[str, MethodResult]
    n_missing: int
    reps: int


def _nb_draw(rng: np.random.Generator, mean: np.ndarray, phi: float) -> np.ndarray:
    size = 1.0 / phi
    lam = rng.gamma(shape=size, scale=mean / size)
    return rng.poisson(lam).astype(float)


def mcar_mask(shape: Tuple[int, int], n_missing: int, rng: np.random.Generator) -> np.ndarray:
    n, t = shape
    w = np.zeros(n * t)
    w[rng.choice(n * t, size=n_missing, replace=False)] = 1.0
    return w.reshape(n, t)


def mcar_within_season_mask(
    shape: Tuple[int, int], n_missing: int, rng: np.random.Generator
) -> np.ndarray:
    """Spread the masked cells evenly over periods; remainders go to the earliest."""
    n, t = shape
    base, extra = divmod(n_missing, t)
    w = np.zeros((n, t))
    for col in range(t):
        cnt = base + (1 if col < extra else 0)
        if cnt > n:
            raise ValueError("n_missing too large for within-season masking")
        rows = rng.choice(n, size=cnt, replace=False)
        w[rows, col] = 1.0
    return w


def propensity_mask(y0: np.ndarray, n_missing: int, seed: int) -> np.ndarray:
    """Mask cells with probability proportional to 1/(exp(y*)+1), without replacement.

    ``y*`` standardizes the matrix within each period: the column mean is
    removed and the result divided by sqrt(sum of squared deviations)/(N-1).
    Periods with no variation get uniform weights and a warning.
    """
    y0 = np.asarray(y0, dtype=float)
    n, t = y0.shape
    if not (0 < n_missing <= n * t):
        raise ValueError("n_missing out of range")
    col_mean = y0.mean(axis=0)
    dev = y0 - col_mean[None, :]
    scale = np.sqrt((dev**2).sum(axis=0)) / max(n - 1, 1)
    ystar = np.zeros_like(y0)
    degenerate = scale == 0
    if np.any(degenerate):
        warnings.warn(
            "constant period column(s) in propensity standardization; using uniform weights there",
            RuntimeWarning,
        )
    ok = ~degenerate
    ystar[:, ok] = dev[:, ok] / scale[None, ok]
    # selection weight 1/(exp(y*)+1), computed in log space to survive large y*
    logw = -np.logaddexp(0.0, ystar)
    w_sel = np.exp(logw)

    rng = np.random.default_rng(seed)
    keys = rng.exponential(scale=1.0, size=y0.size)
    with np.errstate(divide="ignore"):
        race = np.where(w_sel.ravel() > 0, keys / w_sel.ravel(), np.inf)
    chosen = np.argsort(race, kind="stable")[:n_missing]
    w = np.zeros(n * t)
    w[chosen] = 1.0
    return w.reshape(n, t)


def generate(s: SimScenario) -> Tuple[PanelDataset, np.ndarray]:
    """Draw one panel from the scenario; returns the dataset and the true
    untreated outcome at every cell."""
    rng = np.random.default_rng(s.seed)
    n, t = s.n_units, s.n_periods
    theta = rng.normal(s.effect_mean, s.effect_sd, size=n)
    eta = rng.normal(s.effect_mean, s.effect_sd, size=t)
    i_idx = np.arange(1, n + 1)[:, None]
    t_idx = np.arange(1, t + 1)[None, :]
    gamma = rng.normal(-(i_idx + t_idx) / s.interaction_scale, 1.0)

    mu = theta[:, None] + eta[None, :]
    if s.which in ("S2", "S3"):
        mu = mu + gamma

    y0 = _nb_draw(rng, np.exp(mu), s.dispersion)
    if s.which == "S3":
        seasonal = s.seasonal_level * (t_idx % 2).astype(float)
        y0 = y0 + rng.poisson(np.broadcast_to(seasonal, (n, t))).astype(float)
    z = _nb_draw(rng, np.exp(mu + s.control_shift), s.dispersion)

    y1 = s.treated_ratio * y0

    if s.mechanism == "mcar":
        w = mcar_mask((n, t), s.n_missing, rng)
    elif s.mechanism == "mcar_within_season":
        w = mcar_within_season_mask((n, t), s.n_missing, rng)
    else:
        w = propensity_mask(y0, s.n_missing, seed=int(rng.integers(0, 2**63 - 1)))

    y_obs = np.where(w == 1, y1, y0)
    data = PanelDataset(y_obs=y_obs, w=w, controls=[z], transform="log1p")
    return data, y0


def default_sim_solver_config() -> SolverConfig:
    """Completion settings used by the simulation harness."""
    return SolverConfig(
        lam=0.0, max_iters=500, tol=1e-7, continuation=True,
        center=True, debias=True,
    )


def _fit_method(
    method: str, data: PanelDataset, seed: int, cv_folds: int = 20
) -> Tuple[np.ndarray, bool]:
    """Impute the untreated primary outcome with one method.

    Returns (y0_hat, converged-ish flag). Completion methods cross-validate
    their threshold on primary-layer holdouts.
    """
    base = default_sim_solver_config()
    if method == "TC":
        lam, _ = select_lambda(data, base, folds=cv_folds, seed=seed)
        y0_hat, _ = impute_counterfactuals(data, replace(base, lam=lam))
        return y0_hat, True
    if method in ("MC1", "MC2"):
        derived = as_completion_dataset(data, method)
        lam, _ = select_lambda(derived, base, folds=cv_folds, seed=seed)
        y0_hat, _ = impute_counterfactuals(derived, replace(base, lam=lam))
        return y0_hat, True
    if method in ("LL1", "LL2", "LL3"):
        fit = fit_nb(data, NBModelSpec(variant=method))
        cells = np.argwhere(np.ones_like(data.w, dtype=bool))
        vals = impute_nb(fit, cells)
        return vals.reshape(data.w.shape), fit.converged
    raise ValueError(f"unknown method {method!r}")


def run_comparison(
    s: SimScenario,
    methods: Sequence[str] = ("LL1", "LL2", "LL3", "MC1", "TC"),
    reps: int = 20,
    seed: int = 0,
) -> SimResult:
    """Replicate the scenario and score each method on the masked cells.

    Per replication and method: mean squared error of the transformed
    imputations against the transformed truth on masked cells, the estimated
    average relative effect, and the per-cell absolute percentage errors.
    Method failures are recorded as NaN rows, not raised.
    """
    for m in methods:
        if m not in SIM_METHODS:
            raise ValueError(f"unknown method {m!r}; choose from {SIM_METHODS}")
    truth_delta = 1.0 / s.treated_ratio - 1.0
    out = {m: MethodResult() for m in methods}
    child_seeds = np.random.SeedSequence(seed).spawn(reps)
    for r in range(reps):
        rep_seed = int(child_seeds[r].generate_state(1)[0] % (2**31))
        data, y0 = generate(replace(s, seed=rep_seed))
        masked = data.w == 1
        z_true = np.log1p(y0[masked])
        y1 = data.y_obs
        for m in methods:
            try:
                y0_hat, _ = _fit_method(m, data, seed=rep_seed)
            except Exception as exc:  # record, don't kill the sweep
                warnings.warn(f"method {m} failed on replication {r}: {exc}", RuntimeWarning)
                out[m].delta_hats.append(float("nan"))
                out[m].mse_masked.append(float("nan"))
                out[m].mape_per_cell.append([float("nan")] * int(masked.sum()))
                continue
            mse = float(np.mean((np.log1p(y0_hat[masked]) - z_true) ** 2))
            delta = estimate_delta(y1, y0_hat, data.w).delta_hat
            with np.errstate(divide="ignore", invalid="ignore"):
                mape = np.abs(y0_hat[masked] - y0[masked]) / y0[masked]
            mape = np.where(y0[masked] > 0, mape, np.nan)
            out[m].delta_hats.append(delta)
            out[m].mse_masked.append(mse)
            out[m].mape_per_cell.append([float(v) for v in mape])
    return SimResult(truth_delta=truth_delta, per_method=out, n_missing=s.n_missing, reps=reps)


def rate_experiment(
    r: int,
    n_units: int,
    n_periods: int,
    k_grid: Sequence[int],
    noise_sd: float,
    seed: int,
    n_masked: Optional[int] = None,
    lam: Optional[float] = None,
    cv_folds: int = 5,
    base_cfg: Optional[SolverConfig] = None,
) -> List[Tuple[int, float]]:
    """Masked-cell RMSE of completion as the number of outcome layers grows.

    Draws one rank-``r`` factor panel per call: layer 1 is ``A @ B.T`` plus
    noise, each further layer ``A @ G_k @ B.T`` plus noise with its own mixing
    matrix, all sharing the factors. The same sparsely-observed first-layer
    mask is reused across the grid so the layers-added comparison is paired.
    ``lam=None`` cross-validates the threshold per grid point; a fixed ``lam``
    (e.g. near zero with continuation) suits noiseless recovery checks.
    """
    kmax = int(max(k_grid))
    if r > min(n_units, n_periods * min(int(k) for k in k_grid)):
        raise ValueError("rank exceeds what the smallest grid point can support")
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(n_units, r))
    B = rng.normal(size=(n_periods, r))
    layers = [A @ B.T]
    for _ in range(kmax - 1):
        G = rng.normal(size=(r, r))
        layers.append(A @ G @ B.T)
    noise = [rng.normal(scale=noise_sd, size=(n_units, n_periods)) if noise_sd > 0
             else np.zeros((n_units, n_periods)) for _ in range(kmax)]

    if n_masked is None:
        n_masked = (n_units * n_periods) // 2
    flat = rng.choice(n_units * n_periods, size=n_masked, replace=False)
    mask1 = np.zeros(n_units * n_periods, dtype=bool)
    mask1[flat] = True
    mask1 = mask1.reshape(n_units, n_periods)

    from .solver import MaskedMatrix, complete, cross_validate_lambda, default_lambda_grid

    results = []
    truth1 = layers[0]
    for k in k_grid:
        k = int(k)
        vals = np.concatenate([layers[j] + noise[j] for j in range(k)], axis=1)
        obs = np.ones_like(vals, dtype=bool)
        obs[:, : n_periods][mask1] = False
        mm = MaskedMatrix(values=vals, observed=obs)
        cfg = base_cfg if base_cfg is not None else SolverConfig(
            lam=0.0, continuation=True, center=True, debias=True
        )
        if lam is None:
            eligible = np.zeros_like(obs)
            eligible[:, :n_periods] = True
            grid = default_lambda_grid(mm, n=15)
            n_elig = int((obs & eligible).sum())
            lam_k, _ = cross_validate_lambda(
                mm, grid, min(cv_folds, n_elig), seed, cfg=cfg, eligible=eligible
            )
        else:
            lam_k = float(lam)
        fit = complete(mm, replace(cfg, lam=lam_k))
        pred = fit.theta_hat[:, :n_periods]
        rmse = float(np.sqrt(np.mean((pred[mask1] - truth1[mask1]) ** 2)))
        results.append((k, rmse))
    return results
