"""Alternating least squares for the CP optimality equations.

One ALS sweep is one pass of block nonlinear Gauss-Seidel over the modes:
mode ``n`` is replaced by the exact least-squares minimizer
``Z_(n) Phi^(n) pinv(Gamma^(n))`` given the freshest other factors.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np

from .cp_model import (
    DegenerateIterateError,
    FactorSet,
    evaluate,
    gamma,
    normalize_and_sort,
)
from . import kernels
from .tensor_core import Tensor, _charge, _check_factors, count_work, frobenius_norm, mttkrp
from .trace import CONVERGED, ITERATION_LIMIT, ConvergenceTrace

log = logging.getLogger(__name__)

__all__ = ["AlsOptions", "sym_pinv", "als_sweep", "als_solve"]


@dataclass
class AlsOptions:
    max_sweeps: int = 10_000
    tol: float = 1e-10
    normalize: bool = True
    pinv_threshold: float = 1e-12

    def __post_init__(self):
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.pinv_threshold < 0:
            raise ValueError("pinv_threshold must be non-negative")
        if self.max_sweeps < 0:
            raise ValueError("max_sweeps must be non-negative")


def sym_pinv(g: np.ndarray, threshold: float = 1e-12) -> np.ndarray:
    """Pseudoinverse of a symmetric PSD matrix by eigendecomposition.

    Eigenvalues at or below ``threshold * max_eigenvalue`` are discarded.
    """
    w, v = np.linalg.eigh(g)
    top = w[-1]
    if top <= 0.0:
        return np.zeros_like(g)
    keep = w > threshold * top
    vk = v[:, keep]
    return (vk / w[keep]) @ vk.T


def als_sweep(z: Tensor, f: FactorSet, normalize: bool = False,
              pinv_threshold: float = 1e-12) -> FactorSet:
    """One ALS iteration over modes ``0..N-1`` in order.

    If ``normalize`` is set the equilibrating normalization and the sort by
    decreasing weight are applied once, after the full sweep.
    """
    if kernels.eligible(z):
        _check_factors(z, f.factors)
        _charge(z.ndim * z.work_size)
        status, factors, lam = kernels.relax(z, f.factors, sweeps=1, normalize=normalize,
                                             pinv_threshold=pinv_threshold)
        if status != kernels.OK:
            raise DegenerateIterateError(f"ALS produced a degenerate iterate (code {status})")
        return FactorSet(factors, lam)
    factors = [a.copy() for a in f.factors]
    grams = [a.T @ a for a in factors]
    for n in range(len(factors)):
        rhs = mttkrp(z, factors, n)
        a = rhs @ sym_pinv(gamma(grams, n), pinv_threshold)
        if not np.any(a):
            raise DegenerateIterateError(f"ALS produced an all-zero factor in mode {n}")
        factors[n] = a
        grams[n] = a.T @ a
    out = FactorSet(factors)
    return normalize_and_sort(out) if normalize else out


def als_solve(z: Tensor, f0: FactorSet, opts: AlsOptions | None = None,
              seed: int | None = None, phase: str = "als",
              trace: ConvergenceTrace | None = None):
    """Iterate :func:`als_sweep` until ``grad_norm < opts.tol``.

    Returns
    -------
    (FactorSet, ConvergenceTrace)
        One trace record per sweep performed; the starting point is kept
        in ``trace.initial``.  Time spent evaluating the stopping criterion
        is excluded from ``seconds``.  A caller-supplied ``trace`` is filled
        in place, so it keeps the sweeps done before an error propagates.
    """
    opts = opts or AlsOptions()
    znorm = frobenius_norm(z)
    work_per_sweep = z.ndim * z.work_size
    if trace is None:
        trace = ConvergenceTrace(seed=seed)
    g, fval = evaluate(z, f0, znorm)
    trace.set_initial(g, fval)
    f = f0
    elapsed = 0.0
    work = 0.0
    sweep = 0
    while g >= opts.tol and sweep < opts.max_sweeps:
        with count_work() as tally:
            t0 = time.perf_counter()
            f = als_sweep(z, f, opts.normalize, opts.pinv_threshold)
            elapsed += time.perf_counter() - t0
        work += tally.entries / work_per_sweep
        sweep += 1
        g, fval = evaluate(z, f, znorm)
        trace.append(phase, sweep, g, fval, elapsed, work)
    trace.outcome = CONVERGED if g < opts.tol else ITERATION_LIMIT
    log.debug("ALS finished after %d sweeps, g=%.3e (%s)", sweep, g, trace.outcome)
    return f, trace
