"""Adaptive multiplicative setup phase (bootstrap AMG for CP).

The setup V-cycle relaxes random test factor matrices (TFMs) and the boot
factor matrices (BFMs) with ALS, fits one interpolation operator per
coarsened mode to the relaxed factors by weighted least squares, makes it
orthonormal through a Cholesky factor of ``P^T P``, and forms the Galerkin
coarse tensor ``Z x_n Phat_n^T``.  The coarse problem is again a plain CP
problem, so the same procedure recurses down to the coarsest level.

Levels are numbered from 0 (finest).  ``Level.transfers`` holds the
operators that map level ``l + 1`` to level ``l``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .als import als_sweep
from .cp_model import FactorSet, gamma, gram_matrices
from .tensor_core import Tensor, mttkrp, multi_mode_product

__all__ = [
    "TransferBuildError",
    "ModeCoarsening",
    "TransferOperator",
    "Level",
    "Hierarchy",
    "SetupOptions",
    "coarsest_thresholds",
    "default_num_test_blocks",
    "coarsen_mode",
    "ls_weights",
    "fit_interpolation",
    "orthonormalize",
    "galerkin_tensor",
    "restrict",
    "prolong",
    "setup_vcycle",
    "rebuild_downsweep",
]

#: Interpolation weight used for blocks whose gradient vanishes.
WEIGHT_CAP = 1e12
#: Relative Cholesky pivot below which an interpolation counts as rank deficient.
CHOL_RTOL = 1e-6


class TransferBuildError(ArithmeticError):
    """Raised when an interpolation operator is rank deficient."""


@dataclass(frozen=True)
class ModeCoarsening:
    """Geometric coarsening of one mode: every other point is kept.

    Indices are 0-based, so the coarse points are ``0, 2, 4, ...`` and coarse
    point ``i`` gets the coarse label ``i // 2``.  ``interp_sets`` maps each
    fine-only point to the coarse labels it interpolates from: both
    neighbours, or only the left one at an even-length right endpoint.
    """

    size: int
    coarse: np.ndarray
    fine: np.ndarray
    interp_sets: dict

    @property
    def coarse_size(self) -> int:
        return self.coarse.size

    @staticmethod
    def alpha(i: int) -> int:
        return i // 2


def coarsen_mode(size: int) -> ModeCoarsening:
    if size < 2:
        raise ValueError(f"cannot coarsen a mode of size {size}")
    coarse = np.arange(0, size, 2)
    fine = np.arange(1, size, 2)
    sets = {}
    for i in fine.tolist():
        if i + 1 < size:
            sets[i] = ((i - 1) // 2, (i + 1) // 2)
        else:
            sets[i] = ((i - 1) // 2,)
    return ModeCoarsening(size, coarse, fine, sets)


@dataclass
class TransferOperator:
    """Interpolation ``P``, Cholesky factor of ``P^T P`` and ``Phat = P L^-T``.

    Restriction is ``Phat^T``.
    """

    P: sp.csr_matrix
    L: np.ndarray
    P_hat: np.ndarray

    @property
    def R(self) -> np.ndarray:
        return self.P_hat.T

    @property
    def fine_size(self) -> int:
        return self.P_hat.shape[0]

    @property
    def coarse_size(self) -> int:
        return self.P_hat.shape[1]


@dataclass
class Level:
    """One level of the hierarchy.

    ``transfers`` is keyed by the modes that are coarsened below this level
    (the active set); modes outside it pass to the next level unchanged.
    The coarsest level has no transfers.
    """

    tensor: Tensor
    transfers: dict = field(default_factory=dict)

    @property
    def active(self) -> tuple[int, ...]:
        return tuple(sorted(self.transfers))

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.tensor.shape)

    @property
    def is_coarsest(self) -> bool:
        return not self.transfers

    def coarse_shape(self) -> tuple[int, ...]:
        return tuple(
            self.transfers[n].coarse_size if n in self.transfers else size
            for n, size in enumerate(self.shape)
        )


@dataclass
class Hierarchy:
    levels: list[Level]

    def __len__(self) -> int:
        return len(self.levels)

    def __getitem__(self, i: int) -> Level:
        return self.levels[i]

    @property
    def finest(self) -> Level:
        return self.levels[0]

    @property
    def coarsest(self) -> Level:
        return self.levels[-1]

    def describe(self) -> list[dict]:
        """Per-level shapes and operator sparsity, for JSON dumps."""
        out = []
        for i, lev in enumerate(self.levels):
            out.append({
                "level": i,
                "shape": list(lev.shape),
                "active_modes": list(lev.active),
                "interp_nnz": {str(n): int(t.P.nnz) for n, t in lev.transfers.items()},
            })
        return out


@dataclass
class SetupOptions:
    """Relaxation counts and coarsening thresholds for the setup phase."""

    nu1: int = 5
    nu2: int = 5
    nu_c: int = 100
    coarsest: Optional[Sequence[int]] = None
    pinv_threshold: float = 1e-12
    rcond: float = 1e-12


def coarsest_thresholds(shape: Sequence[int], rank: int,
                        coarsest: Optional[Sequence[int] | int] = None) -> tuple[int, ...]:
    """Per-mode maximal coarsest-level sizes; default ``2 R``.

    A mode is coarsened while its size exceeds the threshold.  With the
    default every coarsened size is at least ``R + 1``.
    """
    if coarsest is None:
        return tuple(2 * rank for _ in shape)
    if np.isscalar(coarsest):
        coarsest = [int(coarsest)] * len(shape)
    thr = tuple(int(c) for c in coarsest)
    if len(thr) != len(shape):
        raise ValueError("one coarsest size per mode is required")
    if any(c < rank for c in thr):
        raise ValueError(f"coarsest sizes {thr} must be at least R={rank}")
    return thr


def default_num_test_blocks(rank: int) -> int:
    """Smallest count making the 2-point interpolation fits overdetermined."""
    return 2 if rank > 1 else 3


# -- interpolation weights and fitting -------------------------------------


def _capped_ratio(num: float, den: float, cap: float) -> float:
    if den == 0.0 or num / den > cap:
        return cap
    return num / den


def _mode_weights(z: Tensor, f: FactorSet, modes: Sequence[int],
                  cap: float) -> dict[int, float]:
    grams = gram_matrices(f.factors)
    out = {}
    for n in modes:
        g = f.factors[n] @ gamma(grams, n) - mttkrp(z, f.factors, n)
        out[n] = _capped_ratio(float(np.sum(f.factors[n] ** 2)), float(np.sum(g * g)), cap)
    return out


def ls_weights(blocks: Sequence[FactorSet], boot: Optional[FactorSet], z: Tensor,
               mode: int, cap: float = WEIGHT_CAP) -> np.ndarray:
    """Least-squares weights ``||A^(n)||^2 / ||G^(n)||^2`` for the fit vectors.

    Each test block contributes ``R`` equal weights computed from its own
    mode-``mode`` gradient; the boot factors, if given, are appended last.
    A vanishing gradient gets the weight ``cap``.
    """
    sets = list(blocks) + ([boot] if boot is not None else [])
    parts = [np.full(f.rank, _mode_weights(z, f, [mode], cap)[mode]) for f in sets]
    return np.concatenate(parts)


def fit_interpolation(c: ModeCoarsening, fit_vectors: np.ndarray, w: np.ndarray,
                      rcond: float = 1e-12) -> sp.csr_matrix:
    """Interpolation operator whose F-rows best reproduce ``fit_vectors``.

    For each fine-only point ``i`` the weights solve the diagonally weighted
    least-squares problem ``u_ik ~ sum_j p_ij u_k[coarse j]`` over the fit
    vectors ``k`` through its normal equations.  Normal matrices whose
    eigenvalue ratio falls below ``rcond`` are treated as singular and get
    equal averaging weights.  C-rows are unit rows.
    """
    u = np.asarray(fit_vectors, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if u.shape[0] != c.size or u.shape[1] != w.size:
        raise ValueError("fit vectors and weights do not match the coarsening")
    uc = u[c.coarse]
    rows = [c.coarse]
    cols = [c.coarse // 2]
    vals = [np.ones(c.coarse_size)]

    two = np.array([i for i, s in c.interp_sets.items() if len(s) == 2], dtype=np.int64)
    if two.size:
        j0 = (two - 1) // 2
        x = np.stack([uc[j0], uc[j0 + 1]], axis=1)          # (m, 2, n_f)
        xw = x * w
        normal = xw @ x.transpose(0, 2, 1)                    # (m, 2, 2)
        rhs = np.einsum("mjk,mk->mj", xw, u[two])
        eig = np.linalg.eigvalsh(normal)
        ok = eig[:, 0] > rcond * np.maximum(eig[:, 1], np.finfo(float).tiny)
        coef = np.full((two.size, 2), 0.5)
        if np.any(ok):
            coef[ok] = np.linalg.solve(normal[ok], rhs[ok][..., None])[..., 0]
        rows += [two, two]
        cols += [j0, j0 + 1]
        vals += [coef[:, 0], coef[:, 1]]

    for i, s in c.interp_sets.items():
        if len(s) == 1:
            xv = uc[s[0]]
            den = float(np.sum(w * xv * xv))
            coef1 = float(np.sum(w * xv * u[i])) / den if den > 0 else 1.0
            rows.append(np.array([i]))
            cols.append(np.array([s[0]]))
            vals.append(np.array([coef1]))

    return sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(c.size, c.coarse_size),
    )


def orthonormalize(P) -> TransferOperator:
    """Cholesky-orthonormalize ``P``: ``Phat = P L^-T`` with ``L L^T = P^T P``."""
    P = sp.csr_matrix(P)
    dense = P.toarray()
    B = dense.T @ dense
    try:
        L = sla.cholesky(B, lower=True)
    except np.linalg.LinAlgError as exc:
        raise TransferBuildError("P^T P is not positive definite") from exc
    d = np.diag(L)
    if d.min() <= CHOL_RTOL * d.max():
        raise TransferBuildError(f"P is numerically rank deficient (pivot ratio {d.min() / d.max():.1e})")
    P_hat = sla.solve_triangular(L, dense.T, lower=True).T
    return TransferOperator(P, L, np.ascontiguousarray(P_hat))


def galerkin_tensor(z: Tensor, level: Level) -> Tensor:
    """Coarse tensor ``Z x_{n in I_c} Phat_n^T``; dense unless ``I_c`` is empty."""
    for n, t in level.transfers.items():
        if t.fine_size != z.shape[n]:
            raise ValueError(f"transfer for mode {n} does not match size {z.shape[n]}")
    if not level.transfers:
        return z
    return multi_mode_product(z, {n: t.R for n, t in level.transfers.items()})


def restrict(level: Level, f: FactorSet) -> FactorSet:
    """``R_n A^(n)`` on the active modes, identity elsewhere."""
    return FactorSet([
        level.transfers[n].R @ a if n in level.transfers else a
        for n, a in enumerate(f.factors)
    ])


def prolong(level: Level, fc: FactorSet) -> FactorSet:
    """``Phat_n A_c^(n)`` on the active modes, identity elsewhere."""
    return FactorSet([
        level.transfers[n].P_hat @ a if n in level.transfers else a
        for n, a in enumerate(fc.factors)
    ])


# -- the setup V-cycle ------------------------------------------------------


def _relax(z: Tensor, f: FactorSet, sweeps: int, normalize: bool,
           opts: SetupOptions) -> FactorSet:
    for _ in range(sweeps):
        f = als_sweep(z, f, normalize, opts.pinv_threshold)
    return f


def _build_transfers(z: Tensor, active: Sequence[int], blocks: Sequence[FactorSet],
                     boot: Optional[FactorSet], opts: SetupOptions) -> dict:
    sets = list(blocks) + ([boot] if boot is not None else [])
    weights = [_mode_weights(z, f, active, WEIGHT_CAP) for f in sets]
    transfers = {}
    for n in active:
        fit = np.hstack([f.factors[n] for f in sets])
        w = np.concatenate([np.full(f.rank, wt[n]) for f, wt in zip(sets, weights)])
        P = fit_interpolation(coarsen_mode(z.shape[n]), fit, w, opts.rcond)
        transfers[n] = orthonormalize(P)
    return transfers


def _setup_level(z: Tensor, boot: FactorSet, blocks: list[FactorSet], depth: int,
                 thresholds: Sequence[int], fit_boot: bool, downsweep_only: bool,
                 opts: SetupOptions, levels: list[Level]):
    rank = boot.rank
    active = [n for n, size in enumerate(z.shape)
              if size > thresholds[n] and (size + 1) // 2 >= rank]
    normalize = depth == 0
    if not active:
        levels.append(Level(z))
        if not downsweep_only:
            boot = _relax(z, boot, opts.nu_c, normalize, opts)
        return boot, blocks

    blocks = [_relax(z, b, opts.nu1, normalize, opts) for b in blocks]
    if not downsweep_only:
        boot = _relax(z, boot, opts.nu1, normalize, opts)
    transfers = _build_transfers(z, active, blocks, boot if fit_boot else None, opts)
    level = Level(z, transfers)
    levels.append(level)

    zc = galerkin_tensor(z, level)
    boot_c = restrict(level, boot)
    blocks_c = [restrict(level, b) for b in blocks]
    boot_c, _ = _setup_level(zc, boot_c, blocks_c, depth + 1, thresholds,
                             fit_boot, downsweep_only, opts, levels)
    if downsweep_only:
        return boot, blocks
    boot = prolong(level, boot_c)
    boot = _relax(z, boot, opts.nu2, normalize, opts)
    return boot, blocks


def setup_vcycle(z: Tensor, boot: FactorSet, blocks: Sequence[FactorSet],
                 first_cycle: bool = False, opts: SetupOptions | None = None):
    """One CP-AMG-mult V-cycle from the finest tensor ``z``.

    Parameters
    ----------
    z : Tensor
        Finest-level tensor.
    boot : FactorSet
        Current boot factor matrices.
    blocks : sequence of FactorSet
        Test blocks (finest level); relaxed and returned.
    first_cycle : bool
        On the first cycle only the test blocks are fitted; afterwards the
        boot factors are fitted as well.

    Returns
    -------
    (Hierarchy, FactorSet, list of FactorSet)
        The rebuilt hierarchy, the updated boot factors and test blocks.
    """
    opts = opts or SetupOptions()
    thresholds = coarsest_thresholds(z.shape, boot.rank, opts.coarsest)
    levels: list[Level] = []
    boot, blocks = _setup_level(z, boot, list(blocks), 0, thresholds,
                                not first_cycle, False, opts, levels)
    return Hierarchy(levels), boot, blocks


def rebuild_downsweep(z: Tensor, boot: FactorSet, blocks: Sequence[FactorSet],
                      opts: SetupOptions | None = None):
    """Rebuild operators and coarse tensors with one setup down-sweep.

    The test blocks are relaxed and refitted as in a normal down-sweep and
    the supplied boot factors serve as fit targets on every level, but the
    boot factors themselves are neither relaxed nor returned changed.

    Returns
    -------
    (Hierarchy, list of FactorSet)
    """
    opts = opts or SetupOptions()
    thresholds = coarsest_thresholds(z.shape, boot.rank, opts.coarsest)
    levels: list[Level] = []
    _, blocks = _setup_level(z, boot, list(blocks), 0, thresholds,
                             True, True, opts, levels)
    return Hierarchy(levels), blocks
