import json
import textwrap

import numpy as np
import pytest

from mgcp import cli
from mgcp.cli import PlanError, check_tensor, load_plan, main, parse_seeds, run_plan, summarize
from mgcp.problems import inverse_norm_tensor, laplacian_tensor
from mgcp.tensor_core import DenseTensor, SparseTensor
from mgcp.tensor_io import TensorFormatError, detect_format, load_tensor, write_tensor
from mgcp.trace import CONVERGED, ConvergenceTrace

from support import exact_tensor


def write(path, text):
    path.write_text(textwrap.dedent(text).lstrip())
    return path


# -- tensor files -----------------------------------------------------------------


@pytest.mark.parametrize("fmt", ["sparse", "dense"])
def test_round_trip_is_exact(tmp_path, rng, fmt):
    arr = rng.standard_normal((3, 4, 2)) * (rng.random((3, 4, 2)) < 0.5)
    path = tmp_path / ("t.tns" if fmt == "sparse" else "t.dns")
    write_tensor(path, DenseTensor(arr), fmt)
    back = load_tensor(path)
    assert isinstance(back, SparseTensor if fmt == "sparse" else DenseTensor)
    np.testing.assert_array_equal(back.todense().data, arr)


def test_sparse_file_uses_one_based_indices(tmp_path):
    path = write(tmp_path / "a.tns", """
        2
        2 3
        # comment line
        1 1 0.5
        2 3 -1.25   # trailing comment
    """)
    t = load_tensor(path).todense().data
    assert t[0, 0] == 0.5 and t[1, 2] == -1.25 and np.count_nonzero(t) == 2


def test_dense_file_is_first_mode_fastest(tmp_path):
    path = write(tmp_path / "a.dns", """
        2 3
        1 2 3 4
        5 6
    """)
    np.testing.assert_array_equal(load_tensor(path).data, [[1, 3, 5], [2, 4, 6]])


def test_detect_format_by_content(tmp_path):
    sparse = write(tmp_path / "a.txt", "2\n2 2\n1 1 1.0\n")
    dense = write(tmp_path / "b.txt", "2 2\n1 2 3 4\n")
    assert detect_format(sparse) == "sparse"
    assert detect_format(dense) == "dense"


@pytest.mark.parametrize("body,line,col,needle", [
    ("2\n2 3\n1 1 1.0\n1 1 2.0\n", 4, 1, "duplicate index (first given on line 3)"),
    ("2\n2 3\n1 4 1.0\n", 3, 3, "index 4 out of range 1..3 for mode 2"),
    ("2\n2 3\n0 1 1.0\n", 3, 1, "out of range"),
    ("2\n2 3\n1 1\n", 3, 1, "expected 2 indices and a value"),
    ("3\n2 3\n", 2, 1, "header says 3 modes"),
    ("2\n2 3\n1 1 nan\n", 3, 5, "finite"),
    ("2\n2 3\n1 x 1.0\n", 3, 3, "index"),
])
def test_sparse_diagnostics(tmp_path, body, line, col, needle):
    path = tmp_path / "bad.tns"
    path.write_text(body)
    with pytest.raises(TensorFormatError) as info:
        load_tensor(path)
    err = info.value
    assert (err.line, err.column) == (line, col)
    assert needle in str(err)
    assert str(err).startswith(f"{path}:{line}:{col}:")


@pytest.mark.parametrize("body,line,needle", [
    ("2 2\n1 2 3\n", 2, "requires 4 values, found 3"),
    ("2 2\n1 2 3 4 5\n", 2, "more than the 4 values"),
    ("2 0\n", 1, "positive"),
])
def test_dense_diagnostics(tmp_path, body, line, needle):
    path = tmp_path / "bad.dns"
    path.write_text(body)
    with pytest.raises(TensorFormatError) as info:
        load_tensor(path)
    assert info.value.line == line
    assert needle in str(info.value)


def test_unknown_format_rejected(tmp_path):
    with pytest.raises(ValueError):
        write_tensor(tmp_path / "x", DenseTensor.zeros((2, 2)), "csv")


# -- plans ------------------------------------------------------------------------


def test_parse_seeds():
    assert parse_seeds("0-3") == [0, 1, 2, 3]
    assert parse_seeds("1, 4, 7") == [1, 4, 7]
    assert parse_seeds("0-1 5") == [0, 1, 5]
    with pytest.raises(PlanError):
        parse_seeds("a-b")
    with pytest.raises(PlanError):
        parse_seeds("1, 1")


PLAN = """
    [plan]
    seeds = 0-2
    output = results

    [defaults]
    tau = 1e-8
    max_ml_cycles = 40
    solve.gs_iters = 5

    [test lap]
    problem = laplacian
    d = 2
    s = 8
    rank = 2
    max_ml_cycles = 60     # test section beats defaults
    variants = als, multilevel, multilevel+fmg

    [test dense]
    problem = inverse_norm
    s = 10
    rank = 3
    coarsest = 6 6 6
"""


def test_plan_parsing_and_precedence(tmp_path):
    plan = load_plan(write(tmp_path / "p.ini", PLAN), {"tau": 1e-6})
    assert plan.seeds == [0, 1, 2]
    assert plan.output == "results"
    lap, dense = plan.tests
    assert lap.name == "lap" and lap.variants == ("als", "multilevel", "multilevel+fmg")
    cfg = lap.config(1, "multilevel+fmg")
    assert cfg.tau == 1e-6                      # flag beats everything
    assert cfg.max_ml_cycles == 60              # test beats defaults
    assert cfg.solve.gs_iters == 5              # defaults beat built-ins
    assert cfg.use_fmg and cfg.rng_seed == 1
    assert not lap.config(1, "multilevel").use_fmg
    dcfg = dense.config(0, "als")
    assert dcfg.max_ml_cycles == 40 and dcfg.coarsest == (6, 6, 6)
    assert dense.variants == ("als", "multilevel")
    assert dense.tensor().shape == (10, 10, 10)


@pytest.mark.parametrize("text,needle", [
    ("[test a]\nproblem = laplacian\nd = 2\nrank = 2\n", "missing 's'"),
    ("[test a]\nproblem = cube\nrank = 2\n", "problem must be"),
    ("[test a]\nproblem = inverse_norm\ns = 5\n", "missing 'rank'"),
    ("[test a]\nproblem = inverse_norm\ns = 5\nrank = 2\nspeed = 3\n", "unknown setting 'speed'"),
    ("[test a]\nproblem = inverse_norm\ns = 5\nrank = 2\nvariants = gd\n", "unknown variant"),
    ("[test a]\nproblem = inverse_norm\ns = 5\nrank = 2\neps = 2\n", "eps"),
    ("[test a]\nproblem = inverse_norm\ns = 5\nrank = 2\ntau = fast\n", "bad value"),
    ("[extra]\n", "unknown section"),
    ("[plan]\nseeds = 0\n", "at least one test"),
])
def test_plan_errors(tmp_path, text, needle):
    path = tmp_path / "bad.ini"
    path.write_text(text)
    with pytest.raises(PlanError) as info:
        load_plan(path)
    assert needle in str(info.value)


# -- running ----------------------------------------------------------------------


@pytest.fixture
def exact_plan(tmp_path):
    z, _ = exact_tensor((12, 12, 12), 2)
    write_tensor(tmp_path / "exact.dns", z)
    return write(tmp_path / "plan.ini", """
        [plan]
        seeds = 0-1

        [test exact]
        problem = file
        path = exact.dns
        rank = 2
        tau = 1e-8
        max_als_sweeps = 5000
    """)


def test_run_plan_writes_traces_and_summary(tmp_path, exact_plan):
    out = tmp_path / "out"
    summary = run_plan(load_plan(exact_plan), out)
    assert len(summary["runs"]) == 4
    for variant in ("als", "multilevel"):
        for seed in (0, 1):
            trace = ConvergenceTrace.from_csv(out / "exact" / variant / f"seed-{seed}.csv")
            assert trace.initial is not None and len(trace) > 0
    table = {r["variant"]: r for r in summary["table"]}
    assert table["multilevel"]["ns"] == 2
    assert table["multilevel"]["joint_successes"] == table["als"]["ns"] == 2
    assert table["multilevel"]["speedup"] is not None
    on_disk = json.loads((out / "summary.json").read_text())
    assert on_disk["table"] == json.loads(json.dumps(summary["table"]))
    assert "exact" in (out / "summary.txt").read_text()


def test_summary_recomputed_from_traces(tmp_path, exact_plan):
    out = tmp_path / "out"
    summary = run_plan(load_plan(exact_plan), out)
    by_key = {}
    for run in summary["runs"]:
        trace = ConvergenceTrace.from_csv(out / run["trace"])
        assert len(trace) == run["iterations"]
        assert trace.records[-1].seconds == run["seconds"]
        by_key[run["variant"], run["seed"]] = (len(trace), trace.records[-1].seconds)
    for row in summary["table"]:
        its = [by_key[row["variant"], s][0] for s in (0, 1)]
        secs = [by_key[row["variant"], s][1] for s in (0, 1)]
        assert row["avg_iterations"] == pytest.approx(np.mean(its))
        assert row["avg_seconds"] == pytest.approx(np.mean(secs))
        if row["variant"] == "multilevel":
            als = [by_key["als", s][1] for s in (0, 1)]
            assert row["speedup"] == pytest.approx(np.mean([a / m for a, m in zip(als, secs)]))


def test_run_plan_is_deterministic_in_iterates(tmp_path, exact_plan):
    a = run_plan(load_plan(exact_plan), tmp_path / "a")
    b = run_plan(load_plan(exact_plan), tmp_path / "b")
    for ra, rb in zip(a["runs"], b["runs"]):
        assert ra["final_grad_norm"] == rb["final_grad_norm"]
        assert ra["iterations"] == rb["iterations"]


def _run(test, variant, seed, outcome, seconds, iterations=10):
    return {"test": test, "variant": variant, "seed": seed, "outcome": outcome,
            "seconds": seconds, "iterations": iterations}


def test_summarize_speedup_rules():
    runs = [
        _run("t", "als", 0, CONVERGED, 4.0, 100),
        _run("t", "als", 1, "iteration-limit", 9.0, 500),
        _run("t", "als", 2, CONVERGED, 6.0, 120),
        _run("t", "multilevel", 0, CONVERGED, 1.0, 10),
        _run("t", "multilevel", 1, CONVERGED, 1.0, 12),
        _run("t", "multilevel", 2, "error", 1.0, 3),
    ]
    als, ml = summarize(runs)
    assert als["ns"] == 2 and als["avg_iterations"] == 110 and als["speedup"] is None
    assert ml["ns"] == 2 and ml["avg_iterations"] == 11
    assert ml["joint_successes"] == 1 and ml["speedup"] == 4.0


def test_summarize_without_joint_successes():
    runs = [_run("t", "als", 0, "iteration-limit", 4.0), _run("t", "multilevel", 0, CONVERGED, 1.0)]
    rows = summarize(runs)
    assert rows[1]["speedup"] is None and rows[1]["joint_successes"] == 0
    assert rows[0]["avg_seconds"] is None


# -- command line -------------------------------------------------------------------


def test_cli_gen_and_check(tmp_path, capsys):
    path = tmp_path / "lap.tns"
    assert main(["gen", "laplacian", "d=1", "s=6", "-o", str(path)]) == 0
    np.testing.assert_array_equal(load_tensor(path).todense().data,
                                  laplacian_tensor(1, 6).todense().data)
    assert main(["check", str(path)]) == 0
    assert "FAIL" not in capsys.readouterr().out
    dense = tmp_path / "inv.dns"
    assert main(["gen", "inverse_norm", "s=5", "-o", str(dense)]) == 0
    np.testing.assert_array_equal(load_tensor(dense).data, inverse_norm_tensor(5).data)


def test_cli_gen_rejects_unknown_parameter(tmp_path):
    assert main(["gen", "laplacian", "q=3", "-o", str(tmp_path / "x.tns")]) == 2


def test_cli_check_reports_parse_errors(tmp_path, capsys):
    path = tmp_path / "bad.tns"
    path.write_text("2\n2 2\n1 3 1.0\n")
    assert main(["check", str(path)]) == 2
    assert f"{path}:3:3:" in capsys.readouterr().err


def test_check_tensor_passes_on_valid_tensors():
    for z in (laplacian_tensor(1, 6), inverse_norm_tensor(6)):
        results = check_tensor(z)
        assert len(results) >= 4
        assert all(ok for _, ok, _ in results), results


def test_non_finite_entries_rejected_at_load(tmp_path):
    path = tmp_path / "inf.dns"
    path.write_text("2 2\n1 inf 0 1\n")
    with pytest.raises(TensorFormatError):
        load_tensor(path)


def test_cli_run_output_directory(tmp_path, monkeypatch, exact_plan, capsys):
    env_out = tmp_path / "from-env"
    monkeypatch.setenv(cli.OUTPUT_ENV, str(env_out))
    assert main(["run", str(exact_plan), "--seeds", "3"]) == 0
    assert (env_out / "exact" / "multilevel" / "seed-3.csv").exists()
    flag_out = tmp_path / "from-flag"
    assert main(["run", str(exact_plan), "--seeds", "3", "--out", str(flag_out)]) == 0
    assert (flag_out / "summary.json").exists()
    assert "wrote 2 traces" in capsys.readouterr().out


def test_cli_run_bad_plan(tmp_path):
    path = tmp_path / "p.ini"
    path.write_text("[test a]\nproblem = nope\n")
    assert main(["run", str(path)]) == 2
