"""Command-line experiment harness.

Subcommands
-----------
``run PLAN``
    Execute every (test, variant, seed) job of an INI experiment plan,
    writing one trace CSV per run plus ``summary.json`` and ``summary.txt``.
``gen PROBLEM key=value ...``
    Write a generated test tensor to a file.
``check FILE``
    Parse a tensor file and run a set of consistency checks on it.

Plan files
----------
A plan is an INI file.  The ``[plan]`` section may set ``seeds`` (e.g.
``0-9`` or ``1, 4, 7``), ``output`` and ``jobs``.  A ``[defaults]`` section
holds solver settings shared by all tests, and each ``[test NAME]`` section
defines one test::

    [plan]
    seeds = 0-9

    [defaults]
    tau = 1e-10

    [test laplacian-1]
    problem = laplacian        # laplacian | inverse_norm | file
    d = 2
    s = 20
    rank = 4
    variants = als, multilevel # also: multilevel+fmg

Solver keys are the fields of :class:`mgcp.driver.SolverConfig` plus
``setup.nu1``-style keys for the relaxation counts.  Precedence, highest
first: command-line flags, the test section, ``[defaults]``, built-in
defaults.  The output directory is taken from ``--out``, then the
``MGCP_OUTPUT_DIR`` environment variable, then the plan's ``output`` key,
then ``./mgcp-out``.

The exit status of ``run`` is 0 when every planned run executed, whether or
not it converged.
"""
from __future__ import annotations

import argparse
import configparser
import json
import logging
import os
import statistics
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import kernels
from .cp_model import FactorSet, gradient, objective, random_factors
from .driver import SolverConfig, run_summary, solve_als_baseline, solve_multilevel
from .fas import FasOptions
from .mg_setup import SetupOptions
from .problems import InverseNormSpec, LaplacianSpec
from .tensor_core import SparseTensor, Tensor, fold, mttkrp, unfold
from .tensor_io import TensorFormatError, load_tensor, write_tensor
from .trace import CONVERGED, ConvergenceTrace

log = logging.getLogger("mgcp")

__all__ = [
    "PlanError",
    "TestSpec",
    "ExperimentPlan",
    "parse_seeds",
    "load_plan",
    "run_plan",
    "summarize",
    "load_tensor",
    "write_tensor",
    "main",
]

VARIANTS = ("als", "multilevel", "multilevel+fmg")
OUTPUT_ENV = "MGCP_OUTPUT_DIR"
DEFAULT_OUTPUT = "mgcp-out"
_PROBLEM_KEYS = {"problem", "d", "s", "path", "format", "variants"}


class PlanError(ValueError):
    """Invalid experiment plan."""


@dataclass
class TestSpec:
    name: str
    problem: str
    params: dict
    rank: int
    variants: tuple[str, ...]
    overrides: dict = field(default_factory=dict)

    def tensor(self, base_dir: Path = Path(".")) -> Tensor:
        if self.problem == "laplacian":
            return LaplacianSpec(int(self.params["d"]), int(self.params["s"])).tensor()
        if self.problem == "inverse_norm":
            return InverseNormSpec(int(self.params["s"])).tensor()
        path = Path(self.params["path"])
        if not path.is_absolute():
            path = base_dir / path
        return load_tensor(path, self.params.get("format", "auto"))

    def config(self, seed: int, variant: str) -> SolverConfig:
        return build_config(self.rank, seed, variant == "multilevel+fmg", self.overrides)


@dataclass
class ExperimentPlan:
    tests: list[TestSpec]
    seeds: list[int]
    output: Optional[str] = None
    jobs: int = 1
    base_dir: Path = Path(".")

    def __post_init__(self):
        if not self.tests:
            raise PlanError("a plan needs at least one test")
        if not self.seeds:
            raise PlanError("a plan needs at least one seed")


# -- plan parsing ------------------------------------------------------------


def parse_seeds(text: str) -> list[int]:
    """``"0-9"`` or ``"1, 4, 7"`` (ranges and single seeds may be mixed)."""
    seeds: list[int] = []
    for part in text.replace(",", " ").split():
        lo, sep, hi = part.partition("-")
        try:
            if sep:
                seeds.extend(range(int(lo), int(hi) + 1))
            else:
                seeds.append(int(part))
        except ValueError:
            raise PlanError(f"bad seed specification {part!r}") from None
    if len(set(seeds)) != len(seeds):
        raise PlanError(f"duplicate seeds in {text!r}")
    return seeds


def _convert(key: str, value: str, kind):
    try:
        if kind is bool:
            low = value.strip().lower()
            if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                raise ValueError(value)
            return low in ("1", "true", "yes", "on")
        if key == "coarsest":
            sizes = [int(v) for v in value.replace(",", " ").split()]
            return sizes[0] if len(sizes) == 1 else tuple(sizes)
        return kind(value)
    except ValueError:
        raise PlanError(f"bad value {value!r} for {key}") from None


_KINDS = {
    "tau": float, "max_ml_cycles": int, "max_als_sweeps": int, "eps": float,
    "max_setup_cycles": int, "min_setup_cycles_before_check": int,
    "n_test_blocks": int, "coarsest": None, "pinv_threshold": float,
}
_NESTED = {"setup": SetupOptions, "solve": FasOptions}


def _solver_overrides(section, where: str) -> dict:
    out = {}
    for key, value in section.items():
        if key in _PROBLEM_KEYS or key == "rank":
            continue
        head, dot, tail = key.partition(".")
        if dot:
            if head not in _NESTED or tail not in {f.name for f in fields(_NESTED[head])}:
                raise PlanError(f"{where}: unknown setting {key!r}")
            kind = float if tail in ("pinv_threshold", "rcond") else int
            out[key] = _convert(key, value, kind)
        elif key in _KINDS:
            out[key] = _convert(key, value, _KINDS[key])
        else:
            raise PlanError(f"{where}: unknown setting {key!r}")
    return out


def build_config(rank: int, seed: int, use_fmg: bool, overrides: dict) -> SolverConfig:
    flat = {k: v for k, v in overrides.items() if "." not in k}
    nested = {name: {} for name in _NESTED}
    for key, value in overrides.items():
        head, dot, tail = key.partition(".")
        if dot:
            nested[head][tail] = value
    return SolverConfig(
        rank=rank, rng_seed=seed, use_fmg=use_fmg,
        setup=SetupOptions(**nested["setup"]), solve=FasOptions(**nested["solve"]),
        **flat,
    )


def load_plan(path, flag_overrides: Optional[dict] = None) -> ExperimentPlan:
    """Parse an INI plan; ``flag_overrides`` take precedence over the file."""
    path = Path(path)
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"),
                                       interpolation=None)
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise PlanError(f"{path}: {exc}") from None
    known = {"plan", "defaults"}
    for name in parser.sections():
        if name not in known and not name.startswith("test "):
            raise PlanError(f"{path}: unknown section [{name}]")
    plan_sec = parser["plan"] if parser.has_section("plan") else {}
    defaults = (_solver_overrides(parser["defaults"], f"{path} [defaults]")
                if parser.has_section("defaults") else {})
    flags = dict(flag_overrides or {})
    seeds_text = flags.pop("seeds", None) or plan_sec.get("seeds", "0-9")
    tests = []
    for name in parser.sections():
        if not name.startswith("test "):
            continue
        sec = parser[name]
        where = f"{path} [{name}]"
        problem = sec.get("problem", "")
        if problem not in ("laplacian", "inverse_norm", "file"):
            raise PlanError(f"{where}: problem must be laplacian, inverse_norm or file")
        required = {"laplacian": ("d", "s"), "inverse_norm": ("s",), "file": ("path",)}[problem]
        for key in required:
            if key not in sec:
                raise PlanError(f"{where}: missing {key!r}")
        if "rank" not in sec:
            raise PlanError(f"{where}: missing 'rank'")
        variants = tuple(v.strip() for v in sec.get("variants", "als, multilevel").split(","))
        for v in variants:
            if v not in VARIANTS:
                raise PlanError(f"{where}: unknown variant {v!r}")
        overrides = {**defaults, **_solver_overrides(sec, where), **flags}
        params = {k: sec[k] for k in ("d", "s", "path", "format") if k in sec}
        spec = TestSpec(name[5:].strip(), problem, params,
                        _convert("rank", sec["rank"], int), variants, overrides)
        try:
            spec.config(0, variants[0])
        except (TypeError, ValueError) as exc:
            raise PlanError(f"{where}: {exc}") from None
        tests.append(spec)
    return ExperimentPlan(tests, parse_seeds(seeds_text), plan_sec.get("output"),
                          int(plan_sec.get("jobs", 1)), path.parent)


# -- running -----------------------------------------------------------------


def _run_job(args):
    test, variant, seed, base_dir, out_dir = args
    kernels.warmup()
    z = test.tensor(base_dir)
    cfg = test.config(seed, variant)
    solve = solve_als_baseline if variant == "als" else solve_multilevel
    _, trace = solve(z, cfg)
    trace_path = out_dir / test.name / variant / f"seed-{seed}.csv"
    trace_path.parent.mkdir(parents=True, exist_ok=True)
    trace.to_csv(trace_path)
    record = run_summary(cfg, trace, variant)
    record.update(test=test.name, trace=str(trace_path.relative_to(out_dir)))
    return record


def _mean(xs):
    return statistics.fmean(xs) if xs else None


def summarize(runs: Sequence[dict]) -> list[dict]:
    """Per-test, per-variant averages and speedups over ALS.

    Iteration and time averages are taken over successful runs.  The
    speedup of a multilevel variant is the mean over seeds where both it
    and ALS converged of ``ALS seconds / multilevel seconds``; it is
    ``None`` when there is no such seed.
    """
    rows = []
    by_test: dict[str, dict[str, dict[int, dict]]] = {}
    for r in runs:
        by_test.setdefault(r["test"], {}).setdefault(r["variant"], {})[r["seed"]] = r
    for test in sorted(by_test):
        variants = by_test[test]
        als = variants.get("als", {})
        for variant in sorted(variants, key=VARIANTS.index):
            seeds = variants[variant]
            ok = [r for _, r in sorted(seeds.items()) if r["outcome"] == CONVERGED]
            row = {
                "test": test,
                "variant": variant,
                "runs": len(seeds),
                "ns": len(ok),
                "avg_iterations": _mean([r["iterations"] for r in ok]),
                "avg_seconds": _mean([r["seconds"] for r in ok]),
                "speedup": None,
            }
            if variant != "als":
                ratios = [als[s]["seconds"] / r["seconds"] for s, r in sorted(seeds.items())
                          if r["outcome"] == CONVERGED and s in als
                          and als[s]["outcome"] == CONVERGED and r["seconds"] > 0]
                row["speedup"] = _mean(ratios)
                row["joint_successes"] = len(ratios)
            rows.append(row)
    return rows


def _format_table(rows: Sequence[dict]) -> str:
    def fmt(v, spec):
        return "-" if v is None else format(v, spec)

    lines = [f"{'test':<20} {'variant':<16} {'ns':>6} {'iters':>9} {'seconds':>9} {'speedup':>8}"]
    for r in rows:
        lines.append(
            f"{r['test']:<20} {r['variant']:<16} {r['ns']:>3}/{r['runs']:<2} "
            f"{fmt(r['avg_iterations'], '9.1f')} {fmt(r['avg_seconds'], '9.3f')} "
            f"{fmt(r['speedup'], '8.2f')}"
        )
    return "\n".join(lines) + "\n"


def run_plan(plan: ExperimentPlan, out_dir) -> dict:
    """Run every job of ``plan`` and write traces and summaries to ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(t, v, s, plan.base_dir, out_dir)
            for t in plan.tests for v in t.variants for s in plan.seeds]
    if plan.jobs > 1:
        with ProcessPoolExecutor(plan.jobs) as pool:
            runs = list(pool.map(_run_job, jobs))
    else:
        runs = [_run_job(j) for j in jobs]
    runs.sort(key=lambda r: (r["test"], VARIANTS.index(r["variant"]), r["seed"]))
    summary = {"runs": runs, "table": summarize(runs)}
    with open(out_dir / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2)
    (out_dir / "summary.txt").write_text(_format_table(summary["table"]))
    return summary


# -- check -------------------------------------------------------------------


def check_tensor(z: Tensor, rank: int = 2, seed: int = 0) -> list[tuple[str, bool, str]]:
    """Consistency checks on a loaded tensor; returns ``(name, ok, detail)``."""
    rng = np.random.default_rng(seed)
    f = random_factors(z.shape, rank, rng)
    results = []

    dense = z.todense()
    ok = bool(np.all(np.isfinite(dense.data)))
    results.append(("finite entries", ok, ""))

    worst = 0.0
    for n in range(z.ndim):
        back = fold(unfold(dense, n), n, z.shape)
        worst = max(worst, float(np.max(np.abs(back.data - dense.data), initial=0.0)))
    results.append(("unfold/fold round trip", worst == 0.0, f"max error {worst:.1e}"))

    sparse = z if isinstance(z, SparseTensor) else SparseTensor.from_dense(z)
    worst = 0.0
    for n in range(z.ndim):
        a = mttkrp(sparse, f.factors, n)
        b = unfold(dense, n) @ _phi(f.factors, n)
        scale = max(1.0, float(np.max(np.abs(b), initial=0.0)))
        worst = max(worst, float(np.max(np.abs(a - b), initial=0.0)) / scale)
    results.append(("MTTKRP sparse vs unfolding", worst < 1e-12, f"relative error {worst:.1e}"))

    if z.size <= 4096:
        worst = _fd_gradient_error(z, f)
        results.append(("gradient vs finite differences", worst < 1e-5,
                        f"relative error {worst:.1e}"))
    return results


def _phi(factors, n):
    from .tensor_core import khatri_rao

    return khatri_rao([a for k, a in enumerate(factors) if k != n][::-1])


def _fd_gradient_error(z: Tensor, f: FactorSet, h: float = 1e-6) -> float:
    grads = gradient(z, f).grads
    worst = 0.0
    for n, a in enumerate(f.factors):
        fd = np.empty_like(a)
        for idx in np.ndindex(a.shape):
            plus, minus = f.copy(), f.copy()
            plus.factors[n][idx] += h
            minus.factors[n][idx] -= h
            fd[idx] = (objective(z, plus) - objective(z, minus)) / (2 * h)
        scale = max(1.0, float(np.max(np.abs(fd))))
        worst = max(worst, float(np.max(np.abs(fd - grads[n]))) / scale)
    return worst


# -- entry point ---------------------------------------------------------------


def _parse_params(items: Sequence[str]) -> dict:
    out = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep:
            raise argparse.ArgumentTypeError(f"expected key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mgcp", description="Multilevel CP decomposition experiments.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="execute an experiment plan")
    run.add_argument("plan", type=Path)
    run.add_argument("--out", type=Path, help=f"output directory (overrides ${OUTPUT_ENV})")
    run.add_argument("--seeds", help="seed list, e.g. 0-9 or 1,2,3")
    run.add_argument("--tau", type=float)
    run.add_argument("--max-ml-cycles", type=int)
    run.add_argument("--max-als-sweeps", type=int)
    run.add_argument("--jobs", type=int, help="parallel worker processes")
    run.add_argument("--backend", choices=("numba", "numpy"))

    gen = sub.add_parser("gen", help="write a generated test tensor")
    gen.add_argument("problem", choices=("laplacian", "inverse_norm"))
    gen.add_argument("params", nargs="*", help="key=value, e.g. d=2 s=20")
    gen.add_argument("-o", "--output", type=Path, required=True)
    gen.add_argument("--format", choices=("sparse", "dense"))

    chk = sub.add_parser("check", help="validate a tensor file")
    chk.add_argument("path", type=Path)
    chk.add_argument("--format", default="auto", choices=("auto", "sparse", "dense"))
    chk.add_argument("--rank", type=int, default=2)
    return p


def _cmd_run(args) -> int:
    if args.backend:
        kernels.set_backend(args.backend)
        os.environ["MGCP_BACKEND"] = args.backend
    flags = {"seeds": args.seeds, "tau": args.tau, "max_ml_cycles": args.max_ml_cycles,
             "max_als_sweeps": args.max_als_sweeps}
    flags = {k: v for k, v in flags.items() if v is not None}
    try:
        plan = load_plan(args.plan, flags)
    except (PlanError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if args.jobs is not None:
        plan = replace(plan, jobs=args.jobs)
    out = args.out or os.environ.get(OUTPUT_ENV) or plan.output or DEFAULT_OUTPUT
    summary = run_plan(plan, out)
    print(_format_table(summary["table"]), end="")
    print(f"wrote {len(summary['runs'])} traces to {out}")
    return 0


def _cmd_gen(args) -> int:
    params = _parse_params(args.params)
    try:
        if args.problem == "laplacian":
            spec = LaplacianSpec(int(params.pop("d", 2)), int(params.pop("s", 20)))
        else:
            spec = InverseNormSpec(int(params.pop("s", 50)))
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if params:
        print(f"error: unknown parameters {sorted(params)}", file=sys.stderr)
        return 2
    write_tensor(args.output, spec.tensor(), args.format)
    print(f"wrote {args.output}")
    return 0


def _cmd_check(args) -> int:
    try:
        z = load_tensor(args.path, args.format)
    except (TensorFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"{args.path}: shape {z.shape}, {type(z).__name__}")
    failed = 0
    for name, ok, detail in check_tensor(z, args.rank):
        failed += not ok
        print(f"  [{'PASS' if ok else 'FAIL'}] {name}" + (f" ({detail})" if detail else ""))
    return 1 if failed else 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    return {"run": _cmd_run, "gen": _cmd_gen, "check": _cmd_check}[args.command](args)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
