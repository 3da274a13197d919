"""Dense and sparse N-way tensors and the multilinear kernels built on them.

Modes are numbered from 0 in this package.  Dense values are linearized with
the first mode varying fastest (column-major over modes), so the mode-``n``
unfolding places entry ``(i_0, ..., i_{N-1})`` in row ``i_n`` and column

    j = sum_{k != n} i_k * J_k,   J_k = prod_{m < k, m != n} I_m.

The same ordering fixes the Khatri-Rao convention: ``khatri_rao([A, B])``
has columns ``a_r (x) b_r``, so the last matrix varies fastest, and
``unfold(t, n) @ khatri_rao(factors[::-1] without n)`` is the MTTKRP.
"""
from __future__ import annotations

import contextvars
from contextlib import contextmanager
from typing import Mapping, Sequence, Union

import numpy as np
import scipy.sparse as sp

from . import kernels

__all__ = [
    "DenseTensor",
    "SparseTensor",
    "Tensor",
    "unfold",
    "fold",
    "mode_n_product",
    "multi_mode_product",
    "khatri_rao",
    "mttkrp",
    "frobenius_norm",
    "hadamard",
    "count_work",
    "WorkTally",
]

#: Default memory budget (number of float64 values) for materialized
#: Khatri-Rao blocks inside the dense MTTKRP.
MTTKRP_BUDGET = 2**26


def _check_shape(shape) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if len(shape) < 1:
        raise ValueError("tensor order must be at least 1")
    if any(s < 1 for s in shape):
        raise ValueError(f"all mode sizes must be >= 1, got {shape}")
    return shape


def _check_mode(mode: int, ndim: int) -> int:
    if not 0 <= mode < ndim:
        raise IndexError(f"mode {mode} out of range for order-{ndim} tensor")
    return int(mode)


class DenseTensor:
    """Dense N-way array of float64 values.

    The wrapped array is stored read-only.  ``values`` gives the documented
    first-mode-fastest linearization; ``from_values`` is its inverse.
    """

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.array(data, dtype=np.float64, copy=True)
        if arr.ndim < 1:
            raise ValueError("tensor order must be at least 1")
        _check_shape(arr.shape)
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor entries must be finite")
        arr.setflags(write=False)
        self.data = arr

    @classmethod
    def from_values(cls, shape, values) -> "DenseTensor":
        shape = _check_shape(shape)
        values = np.asarray(values, dtype=np.float64).ravel()
        if values.size != int(np.prod(shape)):
            raise ValueError(
                f"{values.size} values cannot fill a tensor of shape {shape}"
            )
        return cls(values.reshape(shape, order="F"))

    @classmethod
    def zeros(cls, shape) -> "DenseTensor":
        return cls(np.zeros(_check_shape(shape)))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def values(self) -> np.ndarray:
        return self.data.ravel(order="F")

    @property
    def work_size(self) -> int:
        return self.data.size

    def todense(self) -> "DenseTensor":
        return self

    def __repr__(self) -> str:
        return f"DenseTensor(shape={self.shape})"


class SparseTensor:
    """Coordinate-list sparse tensor.

    Entries are coalesced (duplicates summed), explicit zeros dropped, and
    the list sorted by first-mode-fastest linear index at construction.

    Parameters
    ----------
    subs : array_like, shape (nnz, N)
        Zero-based multi-indices.
    vals : array_like, shape (nnz,)
    shape : sequence of int
    """

    __slots__ = ("subs", "vals", "shape", "_selectors")

    def __init__(self, subs, vals, shape):
        shape = _check_shape(shape)
        subs = np.asarray(subs, dtype=np.int64).reshape(-1, len(shape))
        vals = np.asarray(vals, dtype=np.float64).ravel()
        if subs.shape[0] != vals.size:
            raise ValueError("subs and vals disagree on the number of entries")
        if not np.all(np.isfinite(vals)):
            raise ValueError("tensor entries must be finite")
        if subs.size and (np.any(subs < 0) or np.any(subs >= np.array(shape))):
            raise IndexError("subscript out of range")
        if subs.shape[0]:
            lin = _linear_index(subs, shape)
            uniq, inverse = np.unique(lin, return_inverse=True)
            summed = np.zeros(uniq.size)
            np.add.at(summed, inverse, vals)
            keep = summed != 0.0
            uniq, summed = uniq[keep], summed[keep]
            subs = np.stack(np.unravel_index(uniq, shape, order="F"), axis=1)
            vals = summed
        subs = np.ascontiguousarray(subs, dtype=np.int64)
        subs.setflags(write=False)
        vals.setflags(write=False)
        self.subs = subs
        self.vals = vals
        self.shape = shape
        self._selectors: dict[int, sp.csr_matrix] = {}

    @classmethod
    def from_dense(cls, t: "DenseTensor | np.ndarray") -> "SparseTensor":
        arr = t.data if isinstance(t, DenseTensor) else np.asarray(t, float)
        lin = np.flatnonzero(arr.ravel(order="F"))
        subs = np.stack(np.unravel_index(lin, arr.shape, order="F"), axis=1)
        return cls(subs, arr.ravel(order="F")[lin], arr.shape)

    @property
    def ndim(self) -> int:
        return len(self.shape)

    @property
    def nnz(self) -> int:
        return self.vals.size

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def work_size(self) -> int:
        return self.nnz

    def todense(self) -> DenseTensor:
        arr = np.zeros(self.shape)
        if self.nnz:
            arr[tuple(self.subs.T)] = self.vals
        return DenseTensor(arr)

    def selector(self, mode: int) -> sp.csr_matrix:
        """Return the ``I_mode x nnz`` 0/1 matrix summing entries into rows."""
        sel = self._selectors.get(mode)
        if sel is None:
            n = self.nnz
            sel = sp.csr_matrix(
                (np.ones(n), (self.subs[:, mode], np.arange(n))),
                shape=(self.shape[mode], n),
            )
            self._selectors[mode] = sel
        return sel

    def __repr__(self) -> str:
        return f"SparseTensor(shape={self.shape}, nnz={self.nnz})"


Tensor = Union[DenseTensor, SparseTensor]


def _linear_index(subs: np.ndarray, shape: Sequence[int]) -> np.ndarray:
    return np.ravel_multi_index(tuple(subs.T), shape, order="F")


# -- work accounting -------------------------------------------------------


class WorkTally:
    """Running count of tensor entries streamed through the kernels."""

    def __init__(self):
        self.entries = 0.0

    def add(self, n: float) -> None:
        self.entries += n


_work: contextvars.ContextVar[WorkTally | None] = contextvars.ContextVar(
    "mgcp_work", default=None
)


@contextmanager
def count_work():
    """Collect kernel work performed inside the block into a ``WorkTally``."""
    tally = WorkTally()
    token = _work.set(tally)
    try:
        yield tally
    finally:
        _work.reset(token)


def _charge(n: float) -> None:
    tally = _work.get()
    if tally is not None:
        tally.add(n)


# -- kernels ---------------------------------------------------------------


def unfold(t: Tensor, mode: int):
    """Mode-``mode`` matricization ``Z_(mode)``.

    Returns an ndarray for dense input and a CSR matrix for sparse input.
    """
    mode = _check_mode(mode, t.ndim)
    shape = t.shape
    rest = [k for k in range(len(shape)) if k != mode]
    ncols = int(np.prod([shape[k] for k in rest]))
    if isinstance(t, SparseTensor):
        if rest:
            cols = np.ravel_multi_index(
                tuple(t.subs[:, rest].T), [shape[k] for k in rest], order="F"
            )
        else:
            cols = np.zeros(t.nnz, dtype=np.int64)
        return sp.csr_matrix(
            (t.vals, (t.subs[:, mode], cols)), shape=(shape[mode], ncols)
        )
    return np.moveaxis(t.data, mode, 0).reshape(shape[mode], ncols, order="F")


def fold(m, mode: int, shape) -> DenseTensor:
    """Inverse of :func:`unfold` for dense results."""
    shape = _check_shape(shape)
    mode = _check_mode(mode, len(shape))
    m = m.toarray() if sp.issparse(m) else np.asarray(m, dtype=np.float64)
    rest = [shape[k] for k in range(len(shape)) if k != mode]
    expected = (shape[mode], int(np.prod(rest)))
    if m.shape != expected:
        raise ValueError(f"matrix of shape {m.shape} cannot fold to {shape}")
    arr = m.reshape([shape[mode]] + rest, order="F")
    return DenseTensor(np.moveaxis(arr, 0, mode))


def mode_n_product(t: Tensor, a, mode: int) -> DenseTensor:
    """``t x_mode a``; equivalently ``X_(mode) = a @ Z_(mode)``."""
    a = np.asarray(a, dtype=np.float64)
    mode = _check_mode(mode, t.ndim)
    if a.ndim != 2 or a.shape[1] != t.shape[mode]:
        raise ValueError(
            f"matrix with shape {a.shape} is not conformal with mode {mode} "
            f"of size {t.shape[mode]}"
        )
    _charge(t.work_size * a.shape[0])
    new_shape = list(t.shape)
    new_shape[mode] = a.shape[0]
    if isinstance(t, SparseTensor):
        z = unfold(t, mode)
        return fold(np.asarray((z.T @ a.T).T), mode, new_shape)
    out = np.tensordot(a, t.data, axes=([1], [mode]))
    return DenseTensor(np.moveaxis(out, 0, mode))


def multi_mode_product(t: Tensor, mats: Mapping[int, np.ndarray]) -> Tensor:
    """Apply ``t x_n mats[n]`` for every mapped mode.

    Products along distinct modes commute; they are applied in increasing
    mode order.  An empty map returns ``t`` itself.
    """
    out = t
    for mode in sorted(mats):
        out = mode_n_product(out, mats[mode], mode)
    return out


def khatri_rao(mats: Sequence[np.ndarray]) -> np.ndarray:
    """Column-wise Kronecker product; the last matrix varies fastest."""
    mats = [np.asarray(m, dtype=np.float64) for m in mats]
    if not mats:
        raise ValueError("khatri_rao needs at least one matrix")
    ncols = mats[0].shape[1]
    if any(m.ndim != 2 or m.shape[1] != ncols for m in mats):
        raise ValueError("all matrices must have the same number of columns")
    out = mats[0]
    for m in mats[1:]:
        out = (out[:, None, :] * m[None, :, :]).reshape(-1, ncols)
    return out


def hadamard(mats: Sequence[np.ndarray]) -> np.ndarray:
    """Element-wise product of equally sized matrices."""
    mats = [np.asarray(m, dtype=np.float64) for m in mats]
    if not mats:
        raise ValueError("hadamard needs at least one matrix")
    if any(m.shape != mats[0].shape for m in mats):
        raise ValueError("hadamard operands must share one shape")
    out = mats[0].copy()
    for m in mats[1:]:
        out *= m
    return out


def _check_factors(t: Tensor, factors: Sequence[np.ndarray]) -> int:
    if len(factors) != t.ndim:
        raise ValueError(f"expected {t.ndim} factor matrices, got {len(factors)}")
    rank = factors[0].shape[1]
    for k, (a, size) in enumerate(zip(factors, t.shape)):
        if a.ndim != 2 or a.shape != (size, rank):
            raise ValueError(
                f"factor {k} has shape {a.shape}, expected ({size}, {rank})"
            )
    return rank


def mttkrp(t: Tensor, factors: Sequence[np.ndarray], skip: int,
           budget: int = MTTKRP_BUDGET) -> np.ndarray:
    """Matricized tensor times Khatri-Rao product, ``Z_(skip) @ Phi``.

    ``Phi`` is the Khatri-Rao product of every factor except ``skip``, in
    decreasing mode order.  Sparse tensors are streamed entry by entry
    (cost ``nnz * (N - 1) * R``) and reduced through a fixed CSR selector, so
    the row sums are always accumulated in stored-entry order.  Dense tensors
    are contracted from both sides of ``skip`` with the two partial
    Khatri-Rao blocks; blocks larger than ``budget`` values are streamed in
    row chunks.
    """
    skip = _check_mode(skip, t.ndim)
    rank = _check_factors(t, factors)
    _charge(t.work_size)
    if kernels.eligible(t):
        return kernels.mttkrp(t, factors, skip)
    return _mttkrp_numpy(t, factors, skip, rank, budget)


def _mttkrp_numpy(t: Tensor, factors: Sequence[np.ndarray], skip: int, rank: int,
                  budget: int) -> np.ndarray:
    if isinstance(t, SparseTensor):
        if t.nnz == 0:
            return np.zeros((t.shape[skip], rank))
        w = np.broadcast_to(t.vals[:, None], (t.nnz, rank)).copy()
        for k, a in enumerate(factors):
            if k != skip:
                w *= a[t.subs[:, k]]
        return np.asarray(t.selector(skip) @ w)

    shape = t.shape
    left = int(np.prod(shape[:skip]))
    right = int(np.prod(shape[skip + 1:]))
    z3 = t.data.reshape(left, shape[skip], right)
    after = list(factors[skip + 1:])
    before = list(factors[:skip])
    if right * rank <= budget:
        kr_right = khatri_rao(after) if after else np.ones((1, rank))
        tmp = (z3.reshape(left * shape[skip], right) @ kr_right).reshape(
            left, shape[skip], rank
        )
    else:
        tmp = np.zeros((left, shape[skip], rank))
        chunk = max(1, budget // rank)
        for start in range(0, right, chunk):
            rows = np.arange(start, min(right, start + chunk))
            tmp += z3[:, :, rows] @ _khatri_rao_rows(after, rows)
    if not before:
        return tmp[0]
    kr_left = khatri_rao(before)
    return np.einsum("lir,lr->ir", tmp, kr_left)


def _khatri_rao_rows(mats: Sequence[np.ndarray], rows: np.ndarray) -> np.ndarray:
    idx = np.unravel_index(rows, [m.shape[0] for m in mats])
    out = np.ones((rows.size, mats[0].shape[1]))
    for m, i in zip(mats, idx):
        out *= m[i]
    return out


def frobenius_norm(t: Tensor) -> float:
    """Square root of the sum of squared entries."""
    if isinstance(t, SparseTensor):
        return float(np.linalg.norm(t.vals))
    return float(np.linalg.norm(t.data.ravel()))
