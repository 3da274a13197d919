"""Test tensors: the finite-difference Laplacian and the inverse-norm kernel."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .tensor_core import DenseTensor, SparseTensor

__all__ = [
    "LaplacianSpec",
    "InverseNormSpec",
    "laplacian_matrix",
    "laplacian_tensor",
    "inverse_norm_tensor",
]


@dataclass(frozen=True)
class LaplacianSpec:
    """Laplacian on an ``s^d`` grid, giving an order ``2d`` tensor."""

    d: int
    s: int

    def __post_init__(self):
        if self.d < 1 or self.s < 2:
            raise ValueError("need d >= 1 and s >= 2")

    def tensor(self) -> SparseTensor:
        return laplacian_tensor(self.d, self.s)


@dataclass(frozen=True)
class InverseNormSpec:
    """Order-3 tensor ``z_ijk = (i^2 + j^2 + k^2)^(-1/2)`` of mode size ``s``."""

    s: int

    def __post_init__(self):
        if self.s < 1:
            raise ValueError("need s >= 1")

    def tensor(self) -> DenseTensor:
        return inverse_norm_tensor(self.s)


def laplacian_matrix(d: int, s: int) -> sp.csr_matrix:
    """``sum_k I_{s^(d-k)} (x) D (x) I_{s^(k-1)}`` with ``D = tridiag(-1, 2, -1)``."""
    lap = sp.diags([-np.ones(s - 1), 2 * np.ones(s), -np.ones(s - 1)], [-1, 0, 1])
    total = sp.csr_matrix((s**d, s**d))
    for k in range(1, d + 1):
        term = sp.kron(sp.identity(s ** (d - k)), sp.kron(lap, sp.identity(s ** (k - 1))))
        total = total + term
    total = sp.csr_matrix(total)
    total.eliminate_zeros()
    return total


def laplacian_tensor(d: int, s: int) -> SparseTensor:
    """Reshape the ``s^d x s^d`` Laplacian into an order-``2d`` sparse tensor.

    A matrix row index is split into tensor modes ``0..d-1`` and a column
    index into modes ``d..2d-1``, both first-mode-fastest.  The Kronecker
    factor acting on the fastest matrix index therefore lands in modes
    ``0`` and ``d``, and entry ``(i, j)`` of the matrix is
    ``Z[unravel(i), unravel(j)]``.
    """
    if d < 1 or s < 2:
        raise ValueError("need d >= 1 and s >= 2")
    if 2 * d * np.log2(s) >= 62:
        raise OverflowError(f"index space s^(2d) = {s}^{2 * d} is too large")
    mat = laplacian_matrix(d, s).tocoo()
    grid = (s,) * d
    rows = np.stack(np.unravel_index(mat.row, grid, order="F"), axis=1)
    cols = np.stack(np.unravel_index(mat.col, grid, order="F"), axis=1)
    t = SparseTensor(np.hstack([rows, cols]), mat.data, grid + grid)
    if t.nnz != mat.nnz:
        raise AssertionError(f"reshape lost entries: {t.nnz} != {mat.nnz}")
    return t


def inverse_norm_tensor(s: int) -> DenseTensor:
    """Dense ``s x s x s`` tensor with ``z_ijk = (i^2 + j^2 + k^2)^(-1/2)``.

    The indices ``i, j, k`` in the formula run from 1 to ``s``; storage
    position ``[i-1, j-1, k-1]`` holds ``z_ijk``.
    """
    if s < 1:
        raise ValueError("need s >= 1")
    idx = np.arange(1, s + 1, dtype=np.float64) ** 2
    sq = idx[:, None, None] + idx[None, :, None] + idx[None, None, :]
    return DenseTensor(1.0 / np.sqrt(sq))
