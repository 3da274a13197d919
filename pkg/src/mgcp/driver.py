"""Top-level solvers: the multilevel method and the ALS baseline.

The multilevel solve has three stages:

1. setup V-cycles that build the hierarchy and improve the boot factors,
   halted when the gradient norm stops dropping by a factor ``1 - eps``;
2. optionally one full-multigrid cycle that replaces the boot factors,
   followed by an operator rebuild around the new iterate;
3. FAS V-cycles until ``grad_norm < tau``.  If a solve cycle fails to reduce
   the gradient after the first five, the iterate is discarded and the
   operators are rebuilt once around the previous iterate.

Both solvers draw their starting factors from ``numpy.random.default_rng(
rng_seed)`` with the boot factors drawn first, so a multilevel run and an
ALS run with the same seed start from identical factors.  Times exclude
evaluation of the stopping criterion.
"""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .als import AlsOptions, als_solve
from .cp_model import DegenerateIterateError, FactorSet, evaluate, random_factors
from .fas import FasOptions, fas_vcycle, fmg_cycle
from .mg_setup import (
    SetupOptions,
    TransferBuildError,
    default_num_test_blocks,
    rebuild_downsweep,
    setup_vcycle,
)
from .tensor_core import Tensor, count_work, frobenius_norm
from .trace import CONVERGED, ERROR, ITERATION_LIMIT, ConvergenceTrace

log = logging.getLogger(__name__)

__all__ = [
    "SolverConfig",
    "solve_multilevel",
    "solve_als_baseline",
    "initial_factors",
    "run_summary",
]

#: Solve cycles after which a non-decreasing gradient triggers the rebuild.
REBUILD_AFTER = 5


@dataclass
class SolverConfig:
    """Parameters shared by the multilevel solver and the ALS baseline.

    The relaxation defaults are 5 pre- and post-sweeps with 100 coarsest
    sweeps in the setup phase, and 1/1/50 sweeps with 10 inner
    Gauss-Seidel iterations in the solve phase.  ``n_test_blocks`` defaults
    to 2, or 3 when ``rank == 1``.  ``coarsest`` gives the per-mode size at
    or below which a mode is no longer coarsened (default ``2 * rank``).
    """

    rank: int
    tau: float = 1e-10
    max_ml_cycles: int = 500
    max_als_sweeps: int = 10_000
    eps: float = 0.1
    max_setup_cycles: int = 5
    min_setup_cycles_before_check: int = 3
    use_fmg: bool = False
    n_test_blocks: Optional[int] = None
    coarsest: Optional[Sequence[int] | int] = None
    setup: SetupOptions = field(default_factory=SetupOptions)
    solve: FasOptions = field(default_factory=FasOptions)
    pinv_threshold: float = 1e-12
    rng_seed: Optional[int] = 0

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("rank must be at least 1")
        if not 0.0 < self.eps < 1.0:
            raise ValueError("eps must lie in (0, 1)")
        if self.tau <= 0.0:
            raise ValueError("tau must be positive")
        if self.max_setup_cycles < 1:
            raise ValueError("at least one setup cycle is required")
        if self.max_ml_cycles < 0 or self.max_als_sweeps < 0:
            raise ValueError("cycle limits must be non-negative")
        if self.n_test_blocks is not None and self.n_test_blocks < 1:
            raise ValueError("n_test_blocks must be positive")

    @property
    def num_test_blocks(self) -> int:
        return self.n_test_blocks or default_num_test_blocks(self.rank)

    def setup_options(self) -> SetupOptions:
        opts = SetupOptions(**asdict(self.setup))
        if self.coarsest is not None:
            opts.coarsest = self.coarsest
        opts.pinv_threshold = self.pinv_threshold
        return opts

    def to_dict(self) -> dict:
        out = asdict(self)
        if isinstance(out["coarsest"], tuple):
            out["coarsest"] = list(out["coarsest"])
        return out


def initial_factors(shape: Sequence[int], cfg: SolverConfig):
    """Boot factors and test blocks, uniform on ``[0, 1)``.

    Returns ``(boot, blocks, rng)``; the generator is returned so later
    random draws continue the same stream.
    """
    rng = np.random.default_rng(cfg.rng_seed)
    boot = random_factors(shape, cfg.rank, rng)
    blocks = [random_factors(shape, cfg.rank, rng) for _ in range(cfg.num_test_blocks)]
    return boot, blocks, rng


class _Clock:
    """Accumulates timed seconds and work units of the solver proper."""

    def __init__(self, unit: float):
        self.unit = unit
        self.seconds = 0.0
        self.work = 0.0

    def run(self, fn, *args, **kwargs):
        with count_work() as tally:
            t0 = time.perf_counter()
            try:
                return fn(*args, **kwargs)
            finally:
                self.seconds += time.perf_counter() - t0
                self.work += tally.entries / self.unit


def solve_multilevel(z: Tensor, cfg: SolverConfig):
    """Multilevel CP solve: setup cycles, optional FMG, FAS solve cycles.

    Returns
    -------
    (FactorSet, ConvergenceTrace)
        The final (finest-level, normalized) factors and the trace, whose
        phases are ``setup``, ``fmg``, ``solve`` and ``rebuild`` (a
        discarded solve cycle followed by the operator rebuild; its
        ``grad_norm`` is that of the retained iterate).  ``trace.counters``
        holds the number of cycles of each kind.  A degenerate iterate ends
        the run with outcome ``error`` and the last good factors.
    """
    if len(z.shape) < 1:
        raise ValueError("tensor must have at least one mode")
    boot, blocks, rng = initial_factors(z.shape, cfg)
    setup_opts = cfg.setup_options()
    znorm = frobenius_norm(z)
    clock = _Clock(z.ndim * z.work_size)
    trace = ConvergenceTrace(seed=cfg.rng_seed)
    trace.counters = {"setup": 0, "fmg": 0, "solve": 0, "rebuild": 0}
    g, fval = evaluate(z, boot, znorm)
    trace.set_initial(g, fval)
    cycle = 0

    def record(phase, f):
        nonlocal cycle, g, fval
        cycle += 1
        g, fval = evaluate(z, f, znorm)
        trace.append(phase, cycle, g, fval, clock.seconds, clock.work)
        return g

    try:
        # -- setup phase
        g_old = g
        hier = None
        for k in range(1, cfg.max_setup_cycles + 1):
            hier, boot, blocks = clock.run(setup_vcycle, z, boot, blocks, k == 1, setup_opts)
            trace.counters["setup"] += 1
            g_new = record("setup", boot)
            if g_new < cfg.tau:
                break
            if k >= cfg.min_setup_cycles_before_check and g_new > (1.0 - cfg.eps) * g_old:
                log.debug("setup stagnated after %d cycles", k)
                break
            g_old = g_new

        budget = cfg.max_ml_cycles
        # -- full multigrid warm start
        if cfg.use_fmg and g >= cfg.tau and budget > 0:
            def fmg():
                f = fmg_cycle(hier, cfg.rank, rng, cfg.solve, cfg.pinv_threshold)
                return (f, *rebuild_downsweep(z, f, blocks, setup_opts))
            boot, hier, blocks = clock.run(fmg)
            trace.counters["fmg"] += 1
            budget -= 1
            record("fmg", boot)

        # -- solve phase
        solve_cycles = 0
        rebuilt = False
        while g >= cfg.tau and solve_cycles < budget:
            new = clock.run(fas_vcycle, hier, 0, boot, None, cfg.solve)
            solve_cycles += 1
            trace.counters["solve"] += 1
            g_new, f_new = evaluate(z, new, znorm)
            if solve_cycles > REBUILD_AFTER and not rebuilt and g_new >= g:
                hier, blocks = clock.run(rebuild_downsweep, z, boot, blocks, setup_opts)
                rebuilt = True
                trace.counters["rebuild"] += 1
                log.debug("solve stagnated at cycle %d; operators rebuilt", solve_cycles)
                record("rebuild", boot)
                continue
            boot = new
            cycle += 1
            g, fval = g_new, f_new
            trace.append("solve", cycle, g, fval, clock.seconds, clock.work)
    except (DegenerateIterateError, TransferBuildError) as exc:
        log.warning("multilevel run (seed %s) failed: %s", cfg.rng_seed, exc)
        _record_error(trace, exc, g, fval, clock.seconds, clock.work)
        return boot, trace

    trace.outcome = CONVERGED if g < cfg.tau else ITERATION_LIMIT
    return boot, trace


def solve_als_baseline(z: Tensor, cfg: SolverConfig):
    """Standalone ALS from the same boot factors the multilevel run uses."""
    boot, _, _ = initial_factors(z.shape, cfg)
    opts = AlsOptions(max_sweeps=cfg.max_als_sweeps, tol=cfg.tau,
                      pinv_threshold=cfg.pinv_threshold)
    trace = ConvergenceTrace(seed=cfg.rng_seed)
    try:
        return als_solve(z, boot, opts, seed=cfg.rng_seed, phase="als", trace=trace)
    except DegenerateIterateError as exc:
        log.warning("ALS run (seed %s) failed: %s", cfg.rng_seed, exc)
        last = trace.records[-1] if trace.records else trace.initial
        _record_error(trace, exc, last.grad_norm, last.objective, trace.seconds,
                      trace.work_units)
        return boot, trace


def _record_error(trace, exc, g, fval, seconds, work) -> None:
    # The error row repeats the last good iterate's values so the trace
    # stays finite and shows how the run ended.
    trace.append("error", len(trace) + 1, g, fval, seconds, work)
    trace.outcome = ERROR
    trace.message = f"{type(exc).__name__}: {exc}"


def run_summary(cfg: SolverConfig, trace: ConvergenceTrace, variant: str) -> dict:
    """JSON-ready record of one run: configuration echo, outcome and totals."""
    out = {"variant": variant, "config": cfg.to_dict()}
    out.update(trace.summary())
    return out
