"""Full Approximation Scheme solve phase.

Each level solves ``H(A) = F`` with ``H^(n)(A) = A^(n) Gamma^(n) - Z_(n) Phi^(n)``
(the CP gradient when ``F = 0``).  Relaxation is block nonlinear
Gauss-Seidel over the modes, where each block system
``A^(n) Gamma^(n) = Z_(n) Phi^(n) + F^(n)`` is solved approximately by a few
scalar Gauss-Seidel iterations.  Unlike a pseudoinverse solve this keeps an
exact solution fixed even when ``Gamma^(n)`` is singular.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import scipy.linalg as sla

from .als import als_sweep
from .cp_model import (
    DegenerateIterateError,
    FactorSet,
    GradientSet,
    gamma,
    gram_matrices,
    normalize_and_sort,
    random_factors,
)
from .mg_setup import Hierarchy, Level, prolong, restrict
from . import kernels
from .tensor_core import Tensor, _charge, _check_factors, mttkrp

__all__ = [
    "FasOptions",
    "RhsSet",
    "h_operator",
    "gauss_seidel",
    "bngs_relax",
    "fas_vcycle",
    "fmg_cycle",
]

#: Relative size below which a diagonal entry of Gamma counts as zero.
DIAG_GUARD = 1e-14


@dataclass
class FasOptions:
    nu1: int = 1
    nu2: int = 1
    nu_c: int = 50
    gs_iters: int = 10
    fmg_coarse_sweeps: int = 100

    def __post_init__(self):
        for name in ("nu1", "nu2", "nu_c", "gs_iters", "fmg_coarse_sweeps"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")


@dataclass
class RhsSet:
    """FAS right-hand sides ``F^(n)``; ``None`` entries mean zero."""

    rhs: list[Optional[np.ndarray]]

    @classmethod
    def zeros(cls, ndim: int) -> "RhsSet":
        return cls([None] * ndim)

    def __getitem__(self, n: int) -> Optional[np.ndarray]:
        return self.rhs[n]

    def is_zero(self) -> bool:
        return all(f is None or not np.any(f) for f in self.rhs)


def h_operator(z: Tensor, f: FactorSet) -> GradientSet:
    """``H^(n)(A) = A^(n) Gamma^(n) - Z_(n) Phi^(n)`` for every mode."""
    grams = gram_matrices(f.factors)
    return GradientSet([
        a @ gamma(grams, n) - mttkrp(z, f.factors, n)
        for n, a in enumerate(f.factors)
    ])


def gauss_seidel(a: np.ndarray, gam: np.ndarray, m: np.ndarray, iters: int) -> np.ndarray:
    """``iters`` Gauss-Seidel iterations on ``A Gamma = M``, row by row.

    Every row ``x`` of ``A`` solves the same ``R x R`` symmetric system
    ``Gamma x = m``; the unknowns of a row are swept in increasing order.
    With ``Gamma = Lo + D + Up`` one iteration is
    ``x <- (D + Lo)^-1 (m - Up x)``, applied to all rows at once.

    Raises
    ------
    DegenerateIterateError
        If a diagonal entry of ``Gamma`` is (relatively) zero, which happens
        exactly when some factor column vanishes.
    """
    diag = np.diag(gam)
    top = float(np.max(diag))
    if top <= 0.0 or np.any(diag <= DIAG_GUARD * top):
        raise DegenerateIterateError("Gamma has a zero diagonal entry (zero factor column)")
    lower = np.tril(gam)
    upper = gam - lower
    inv_lower = sla.solve_triangular(lower, np.eye(gam.shape[0]), lower=True)
    step = -(upper.T @ inv_lower.T)
    shift = m @ inv_lower.T
    for _ in range(iters):
        a = a @ step + shift
    return a


def bngs_relax(z: Tensor, f: FactorSet, rhs: Optional[RhsSet] = None, sweeps: int = 1,
               gs_iters: int = 10, normalize: bool = False) -> FactorSet:
    """Block nonlinear Gauss-Seidel sweeps on ``H(A) = F``.

    Modes are updated in order ``0..N-1`` using the freshest factors.  With
    ``normalize`` set (finest level only) each sweep ends with
    :func:`~mgcp.cp_model.normalize_and_sort`.
    """
    if gs_iters < 1:
        raise ValueError("gs_iters must be at least 1")
    if kernels.eligible(z):
        _check_factors(z, f.factors)
        _charge(sweeps * z.ndim * z.work_size)
        status, factors, lam = kernels.relax(
            z, f.factors, None if rhs is None else rhs.rhs, sweeps=sweeps, use_gs=True,
            gs_iters=gs_iters, diag_guard=DIAG_GUARD, normalize=normalize)
        if status != kernels.OK:
            raise DegenerateIterateError(f"BNGS produced a degenerate iterate (code {status})")
        return FactorSet(factors, lam)
    out = f
    for _ in range(sweeps):
        factors = [a.copy() for a in out.factors]
        grams = gram_matrices(factors)
        for n in range(len(factors)):
            m = mttkrp(z, factors, n)
            if rhs is not None and rhs[n] is not None:
                m = m + rhs[n]
            factors[n] = gauss_seidel(factors[n], gamma(grams, n), m, gs_iters)
            grams[n] = factors[n].T @ factors[n]
        out = FactorSet(factors)
        if normalize:
            out = normalize_and_sort(out)
    return out


def _coarse_rhs(level: Level, coarse_z: Tensor, f: FactorSet, f_c0: FactorSet,
                rhs: Optional[RhsSet]) -> RhsSet:
    h = h_operator(level.tensor, f).grads
    h_c = h_operator(coarse_z, f_c0).grads
    out = []
    for n in range(f.ndim):
        resid = -h[n] if rhs is None or rhs[n] is None else rhs[n] - h[n]
        if n in level.transfers:
            resid = level.transfers[n].R @ resid
        out.append(h_c[n] + resid)
    return RhsSet(out)


def fas_vcycle(hier: Hierarchy, level_index: int, f: FactorSet,
               rhs: Optional[RhsSet] = None, opts: FasOptions | None = None) -> FactorSet:
    """One CP-FAS V-cycle starting at ``level_index``.

    The coarse right-hand side is ``H_c(R A) + R (F - H(A))`` on every mode,
    with ``R`` the identity on modes that are not coarsened, and the
    correction ``Phat (A_c - R A)`` is added back.  Only level 0 normalizes.
    """
    opts = opts or FasOptions()
    level = hier.levels[level_index]
    z = level.tensor
    normalize = level_index == 0
    if level.is_coarsest:
        return bngs_relax(z, f, rhs, opts.nu_c, opts.gs_iters, normalize)

    f = bngs_relax(z, f, rhs, opts.nu1, opts.gs_iters, normalize)
    coarse_z = hier.levels[level_index + 1].tensor
    f_c0 = restrict(level, f)
    rhs_c = _coarse_rhs(level, coarse_z, f, f_c0, rhs)
    f_c = fas_vcycle(hier, level_index + 1, f_c0, rhs_c, opts)
    delta = prolong(level, FactorSet([ac - a0 for ac, a0 in zip(f_c.factors, f_c0.factors)]))
    f = FactorSet([a + d for a, d in zip(f.factors, delta.factors)])
    return bngs_relax(z, f, rhs, opts.nu2, opts.gs_iters, normalize)


def fmg_cycle(hier: Hierarchy, rank: int, rng: np.random.Generator,
              opts: FasOptions | None = None, pinv_threshold: float = 1e-12) -> FactorSet:
    """Full multigrid: ALS from a random start on the coarsest level, then
    prolongate and apply one zero-RHS FAS V-cycle on each finer level."""
    opts = opts or FasOptions()
    last = len(hier) - 1
    coarsest = hier.levels[last]
    f = random_factors(coarsest.shape, rank, rng)
    for _ in range(opts.fmg_coarse_sweeps):
        f = als_sweep(coarsest.tensor, f, last == 0, pinv_threshold)
    for ell in range(last, 0, -1):
        f = prolong(hier.levels[ell - 1], f)
        f = fas_vcycle(hier, ell - 1, f, None, opts)
    return f
