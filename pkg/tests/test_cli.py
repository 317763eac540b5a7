import json
import os

import pytest

from poslc import analysis
from poslc.cli import main

MINIMAL = """[protocol]
rho = 0.2
beta = 0.25
num_nodes = 8
budget_k = 4
t_conf = 10
horizon = 300
"""

GRID = MINIMAL + """
[sweep]
rule_id = freshest, blocklisting
adversary_id = null, spam-equivocation

[batch]
replications = 2
"""


def _write(tmp_path, text, name="sc.ini"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def _tree(root):
    out = {}
    for dirpath, _, files in os.walk(root):
        for f in files:
            p = os.path.join(dirpath, f)
            with open(p, "rb") as fh:
                out[os.path.relpath(p, root)] = fh.read()
    return out


def _summary(out):
    with open(os.path.join(out, "summary.jsonl"), encoding="utf-8") as fh:
        return [json.loads(line) for line in fh]


def test_minimal_scenario(tmp_path):
    cfg = _write(tmp_path, MINIMAL)
    out = str(tmp_path / "a")
    assert main(["simulate", "--config", cfg, "--out", out]) == 0
    files = _tree(out)
    assert sorted(files) == ["base/0.csv", "summary.jsonl"]
    rows = _summary(out)
    assert len(rows) == 1 and rows[0]["seed"] == 0 and rows[0]["gridpoint"] == "base"


def test_rerun_and_jobs_are_byte_identical(tmp_path):
    cfg = _write(tmp_path, GRID)
    for name, jobs in (("a", 1), ("b", 1), ("c", 8)):
        assert main(["sweep", "--config", cfg, "--out", str(tmp_path / name), "--jobs", str(jobs)]) == 0
    a, b, c = (_tree(tmp_path / n) for n in "abc")
    assert a == b == c
    rows = _summary(str(tmp_path / "a"))
    assert len(rows) == 8 and all("seed" in r for r in rows)


def test_sweep_requires_grid(tmp_path, capsys):
    cfg = _write(tmp_path, MINIMAL)
    assert main(["sweep", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert "sweep" in capsys.readouterr().err


def test_bad_config_exit_code(tmp_path, capsys):
    cfg = _write(tmp_path, "[protocol]\nrho = x\n")
    assert main(["simulate", "--config", cfg]) == 2
    assert "line 2: [protocol] rho" in capsys.readouterr().err


def test_analyze_trace(tmp_path, capsys):
    cfg = _write(tmp_path, MINIMAL)
    out = str(tmp_path / "a")
    main(["simulate", "--config", cfg, "--out", out])
    capsys.readouterr()
    assert main(["analyze", "--predicate", "maxdl", "--trace", os.path.join(out, "base", "0.csv")]) == 0
    row = json.loads(capsys.readouterr().out)
    assert row["predicate"] == "maxdl" and row["value"] is True and row["n"] > 0


def test_analyze_sampled(tmp_path, capsys):
    cfg = _write(tmp_path, MINIMAL.replace("beta = 0.25", "beta = 0.125"))
    assert main(["analyze", "--config", cfg, "--predicate", "short-prefixes", "--predicate", "few-long-chains",
                 "--k", "12", "--samples", "50", "--seed", "4"]) == 0
    rows = [json.loads(line) for line in capsys.readouterr().out.splitlines()]
    assert [r["predicate"] for r in rows] == ["short-prefixes", "few-long-chains"]
    assert all(r["k"] == 12 and r["n"] == 50 and r["seed"] == 4 for r in rows)
    assert all(0 <= r["bound"] <= 1 and 0 <= r["empirical"] <= 1 for r in rows)


def test_analyze_predicate_list_edges(capsys):
    assert main(["analyze"]) == 0
    assert capsys.readouterr().out == ""
    assert main(["analyze", "--predicate", "bogus"]) != 0
    assert "unknown predicate" in capsys.readouterr().err


def test_solve_params(capsys):
    assert main(["solve-params", "--beta", "0.25", "--epsilon1", "0.2", "--k", "10", "--t-h", "1000"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert abs(analysis.security_residual(out["rho"], 0.25, 0.2)) < 1e-12


def test_solve_params_infeasible(capsys):
    assert main(["solve-params", "--beta", "0.3", "--epsilon1", "0.4", "--k", "10", "--t-h", "1000"]) == 3
    err = capsys.readouterr().err
    assert "1 - 2*beta" in err
