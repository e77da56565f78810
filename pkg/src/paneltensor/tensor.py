"""Dense third-order tensors and the linear algebra the completion pipeline needs:
mode unfoldings, back-folding, outer products, mode products, and Tucker composition.

Index conventions
-----------------
A tensor ``T`` with dims ``(d1, d2, d3)`` unfolds along mode ``l`` into a matrix of
shape ``(d_l, prod of the other dims)``. Columns are ordered with the *earlier*
remaining axis varying fastest, i.e. (0-based) the mode-1 column index of entry
``(i, j, k)`` is ``j + k*d2``, the mode-2 column index is ``i + k*d1``, and the
mode-3 column index is ``i + j*d1``. Back-folding inverts this exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

__all__ = [
    "Tensor3",
    "ModeMatrix",
    "unfold",
    "fold",
    "mode_product",
    "outer3",
    "tucker_compose",
]


@dataclass(frozen=True)
class Tensor3:
    """Immutable dense tensor of order three.

    Parameters
    ----------
    values : ndarray of shape (d1, d2, d3)
        Dense entries; must be finite.
    dim_labels : tuple of str, optional
        Names for the three axes (e.g. ``("unit", "period", "outcome")``).
    """

    values: np.ndarray
    dim_labels: Optional[Tuple[str, str, str]] = None

    def __post_init__(self):
        arr = np.array(self.values, dtype=float, copy=True)
        if arr.ndim != 3:
            raise ValueError(f"expected a 3-d array, got ndim={arr.ndim}")
        if arr.size == 0:
            raise ValueError("tensor must have at least one entry")
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor entries must be finite")
        arr.flags.writeable = False
        object.__setattr__(self, "values", arr)
        if self.dim_labels is not None and len(self.dim_labels) != 3:
            raise ValueError("dim_labels must name all three axes")

    @property
    def dims(self) -> Tuple[int, int, int]:
        return self.values.shape

    def __eq__(self, other) -> bool:
        return isinstance(other, Tensor3) and np.array_equal(self.values, other.values)


@dataclass(frozen=True)
class ModeMatrix:
    """A mode unfolding: matrix plus the mode it came from."""

    mode: int
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.mode not in (1, 2, 3):
            raise ValueError(f"mode must be 1, 2 or 3, got {self.mode}")
        arr = np.array(self.values, dtype=float, copy=True)
        if arr.ndim != 2:
            raise ValueError("unfolding must be a matrix")
        arr.flags.writeable = False
        object.__setattr__(self, "values", arr)

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]


# axis orders that realize the column conventions above via a C-order reshape
_UNFOLD_AXES = {1: (0, 2, 1), 2: (1, 2, 0), 3: (2, 1, 0)}


def unfold(t: Tensor3, mode: int) -> ModeMatrix:
    """Unfold a tensor along ``mode``.

    The result has shape ``(d_mode, product of remaining dims)`` with columns
    ordered so the lower-numbered remaining axis varies fastest.
    """
    if mode not in (1, 2, 3):
        raise ValueError(f"mode must be 1, 2 or 3, got {mode}")
    d = t.dims
    perm = _UNFOLD_AXES[mode]
    mat = t.values.transpose(perm).reshape(d[mode - 1], -1)
    return ModeMatrix(mode=mode, values=mat)


def fold(m: ModeMatrix, dims: Sequence[int]) -> Tensor3:
    """Back-fold a mode matrix into a tensor with the given dims.

    Exact inverse of :func:`unfold` for the matrix's mode.
    """
    d1, d2, d3 = (int(x) for x in dims)
    if d1 <= 0 or d2 <= 0 or d3 <= 0:
        raise ValueError(f"dims must be positive, got {dims}")
    expect = {1: (d1, d3 * d2), 2: (d2, d3 * d1), 3: (d3, d2 * d1)}[m.mode]
    if m.values.shape != expect:
        raise ValueError(
            f"mode-{m.mode} matrix of shape {m.values.shape} does not match dims {(d1, d2, d3)}"
        )
    perm = _UNFOLD_AXES[m.mode]
    # reshape back to the permuted cube, then undo the permutation
    shaped = m.values.reshape(tuple((d1, d2, d3)[a] for a in perm))
    inv = np.argsort(perm)
    return Tensor3(values=shaped.transpose(inv))


def mode_product(t: Tensor3, m: np.ndarray, mode: int) -> Tensor3:
    """Multiply matrix ``m`` into the tensor along ``mode``.

    Satisfies ``unfold(result, mode).values == m @ unfold(t, mode).values``; the
    mode's dimension is replaced by ``m.shape[0]``.
    """
    m = np.asarray(m, dtype=float)
    if m.ndim != 2:
        raise ValueError("mode_product expects a matrix")
    d = list(t.dims)
    if m.shape[1] != d[mode - 1]:
        raise ValueError(
            f"matrix has {m.shape[1]} columns but mode-{mode} dimension is {d[mode - 1]}"
        )
    unf = unfold(t, mode)
    d[mode - 1] = m.shape[0]
    return fold(ModeMatrix(mode=mode, values=m @ unf.values), tuple(d))


def outer3(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> Tensor3:
    """Rank-one tensor with entries ``a[i] * b[j] * c[k]``."""
    a, b, c = (np.asarray(v, dtype=float).ravel() for v in (a, b, c))
    if a.size == 0 or b.size == 0 or c.size == 0:
        raise ValueError("outer3 requires nonempty vectors")
    return Tensor3(values=np.einsum("i,j,k->ijk", a, b, c))


def tucker_compose(core: Tensor3, A: np.ndarray, B: np.ndarray, C: np.ndarray) -> Tensor3:
    """Compose ``core ×1 A ×2 B ×3 C``.

    The mode-1 unfolding of the result equals ``A @ unfold(core, 1) @ kron(C, B).T``.
    """
    out = mode_product(core, np.asarray(A, dtype=float), 1)
    out = mode_product(out, np.asarray(B, dtype=float), 2)
    out = mode_product(out, np.asarray(C, dtype=float), 3)
    return out
