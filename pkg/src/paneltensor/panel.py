"""Panel data model: observed outcomes, treatment mask, control outcomes, and the
assembly of everything into a unit x period x outcome tensor whose first layer has
the to-be-imputed cells marked missing.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Tuple

import numpy as np

from .tensor import Tensor3
from .validation import check_binary_matrix, check_matrix, check_vector

__all__ = ["PanelDataset", "Diagnostics", "EffectEstimate", "CellEffect", "assemble_tensor"]

_TRANSFORMS = ("log1p", "none")


@dataclass(frozen=True)
class PanelDataset:
    """A unit x period panel with one primary outcome and any number of controls.

    ``y_obs`` holds the observed primary outcome; where ``w`` is 1 the cell was
    treated, so the stored value is the treated outcome and the untreated one is
    missing. Controls are fully observed unless a ``control_masks`` entry marks
    cells missing (True = missing), and ``y_missing`` records primary cells with
    no data at all. ``offsets`` are per-unit positive exposures (e.g.
    population); ``covariates`` maps names to unit x period matrices entering
    the models with one scalar coefficient each.
    """

    y_obs: np.ndarray
    w: np.ndarray
    controls: List[np.ndarray] = field(default_factory=list)
    control_masks: Optional[List[Optional[np.ndarray]]] = None
    covariates: Dict[str, np.ndarray] = field(default_factory=dict)
    offsets: Optional[np.ndarray] = None
    transform: str = "log1p"
    y_missing: Optional[np.ndarray] = None

    def __post_init__(self):
        y = check_matrix(self.y_obs, "y_obs")
        w = check_binary_matrix(self.w, "w")
        if w.shape != y.shape:
            raise ValueError(f"w shape {w.shape} does not match y_obs shape {y.shape}")
        object.__setattr__(self, "y_obs", y)
        object.__setattr__(self, "w", w)
        if self.transform not in _TRANSFORMS:
            raise ValueError(f"transform must be one of {_TRANSFORMS}, got {self.transform!r}")
        ctr = [check_matrix(z, f"controls[{k}]") for k, z in enumerate(self.controls)]
        for k, z in enumerate(ctr):
            if z.shape != y.shape:
                raise ValueError(f"controls[{k}] shape {z.shape} does not match panel {y.shape}")
        object.__setattr__(self, "controls", ctr)
        if self.control_masks is not None:
            if len(self.control_masks) != len(ctr):
                raise ValueError("control_masks must align with controls")
            masks = []
            for k, m in enumerate(self.control_masks):
                if m is None:
                    masks.append(None)
                    continue
                m = np.asarray(m, dtype=bool)
                if m.shape != y.shape:
                    raise ValueError(f"control_masks[{k}] has wrong shape")
                masks.append(m)
            object.__setattr__(self, "control_masks", masks)
        cov = {}
        for name, x in self.covariates.items():
            x = check_matrix(x, f"covariate {name!r}")
            if x.shape != y.shape:
                raise ValueError(f"covariate {name!r} shape {x.shape} does not match panel")
            cov[name] = x
        object.__setattr__(self, "covariates", cov)
        if self.offsets is None:
            object.__setattr__(self, "offsets", np.ones(y.shape[0]))
        else:
            off = check_vector(self.offsets, "offsets", n=y.shape[0])
            if np.any(off <= 0):
                raise ValueError("offsets must be positive")
            object.__setattr__(self, "offsets", off)
        if self.y_missing is not None:
            ym = np.asarray(self.y_missing, dtype=bool)
            if ym.shape != y.shape:
                raise ValueError("y_missing has wrong shape")
            object.__setattr__(self, "y_missing", ym)

    @property
    def n_units(self) -> int:
        return self.y_obs.shape[0]

    @property
    def n_periods(self) -> int:
        return self.y_obs.shape[1]

    @property
    def n_outcomes(self) -> int:
        return 1 + len(self.controls)

    def apply_transform(self, x: np.ndarray) -> np.ndarray:
        if self.transform == "log1p":
            if np.any(x < 0):
                raise ValueError("log1p transform requires nonnegative values")
            return np.log1p(x)
        return np.asarray(x, dtype=float)

    def invert_transform(self, z: np.ndarray) -> np.ndarray:
        if self.transform == "log1p":
            return np.clip(np.expm1(z), 0.0, None)
        return np.clip(z, 0.0, None)

    def log_offsets(self) -> np.ndarray:
        """Per-unit additive offset on the transform scale (zero when transform='none')."""
        if self.transform == "log1p":
            return np.log(self.offsets)
        return np.zeros(self.n_units)


class CellEffect(NamedTuple):
    unit: int
    period: int
    y1_obs: float
    y0_imputed: float
    relative_effect: float


@dataclass
class EffectEstimate:
    """Average relative treatment effect over treated cells, with per-cell detail."""

    delta_hat: float
    n_treated: int
    per_cell: List[CellEffect]
    n_excluded: int = 0
    interval: Optional[Tuple[float, float]] = None
    bootstrap_draws: Optional[np.ndarray] = None


@dataclass
class Diagnostics:
    """Fit quality on the transform scale, over observed primary-outcome cells."""

    in_sample_mse: float
    out_of_sample_mse: float = float("nan")
    mape_per_cell: Optional[List[float]] = None


def assemble_tensor(d: PanelDataset) -> Tuple[Tensor3, np.ndarray]:
    """Stack the transformed outcomes into a (units, periods, outcomes) tensor.

    Layer 1 is the transformed primary outcome with treated cells (and any
    recorded gaps) marked missing; the per-unit log offset is removed from it.
    Control layers carry their own masks. Returns the tensor (missing entries
    zero-filled) and the boolean missing indicator of the same shape.
    """
    n, t, k = d.n_units, d.n_periods, d.n_outcomes
    layers = np.zeros((n, t, k))
    missing = np.zeros((n, t, k), dtype=bool)

    z1 = d.apply_transform(d.y_obs) - d.log_offsets()[:, None]
    miss1 = d.w == 1
    if d.y_missing is not None:
        miss1 = miss1 | d.y_missing
    layers[:, :, 0] = np.where(miss1, 0.0, z1)
    missing[:, :, 0] = miss1

    for j, z in enumerate(d.controls):
        zk = d.apply_transform(z)
        mk = None if d.control_masks is None else d.control_masks[j]
        if mk is None:
            layers[:, :, j + 1] = zk
        else:
            layers[:, :, j + 1] = np.where(mk, 0.0, zk)
            missing[:, :, j + 1] = mk

    labels = ("unit", "period", "outcome")
    return Tensor3(values=layers, dim_labels=labels), missing
