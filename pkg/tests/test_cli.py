import json
import subprocess
import sys

import numpy as np
import pytest

from qib import cli, gen, graph, model


def run(*argv):
    return cli.main([str(a) for a in argv])


def load(path):
    return json.loads(path.read_text())


@pytest.fixture
def trivial(tmp_path):
    variables, blocks = model.single_blocks(2)
    obj = model.QuadForm({}, np.ones(2), np.zeros(2), np.zeros(2))
    p = model.Problem(variables, blocks, obj)
    path = tmp_path / "trivial.json"
    path.write_text(json.dumps(model.problem_to_dict(p)))
    return path


class TestSolve:
    def test_trivial_instance(self, trivial, tmp_path):
        out = tmp_path / "sol.json"
        assert run("solve", trivial, "--out", out) == cli.EXIT_OK
        sol = load(out)
        assert sol["status"] == "solution" and sol["objective"] == 0
        assert sol["report"]["within_bound"]

    def test_w3_without_subset(self, tmp_path):
        inst = tmp_path / "w3.json"
        assert run("gen", "w3", "--a", 2, 4, 6, "--a0", 5, "--out", inst) == cli.EXIT_OK
        out = tmp_path / "sol.json"
        code = run("solve", inst, "--epsilon-denominator", 4, "--out", out, "--threads", 1)
        sol = load(out)
        if code == cli.EXIT_INFEASIBLE:
            assert sol["status"] == "infeasible"
        else:
            # an eps-certificate the exact system rejects
            assert code == cli.EXIT_OK and sol["report"]["within_bound"]
            assert sol["max_mixed_infeasibility"] > 0

    def test_missing_file(self, tmp_path, capsys):
        assert run("solve", tmp_path / "absent.json") == cli.EXIT_ERROR
        assert "qib:" in capsys.readouterr().err

    def test_invalid_instance(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        raw = {"variables": [{"id": 0, "lower": 0, "upper": 1, "block": 0}],
               "blocks": [{"id": 0, "variables": [0]}],
               "constraints": [{"kind": "combinatorial", "indicator": [2], "rhs": 1}]}
        bad.write_text(json.dumps(raw))
        assert run("solve", bad) == cli.EXIT_ERROR
        assert "invalid instance" in capsys.readouterr().err

    def test_bad_epsilon(self, trivial):
        assert run("solve", trivial, "--epsilon", 1.5) == cli.EXIT_ERROR

    def test_byte_identical_reruns(self, tmp_path):
        inst = tmp_path / "r.json"
        run("gen", "random", "--n", 4, "--mixed", 3, "--comb", 1, "--seed", 3, "--out", inst)
        outs = []
        for threads in (1, 2, 1):
            out = tmp_path / f"sol{len(outs)}.json"
            run("solve", inst, "--epsilon-denominator", 3, "--threads", threads, "--out", out)
            outs.append(out.read_bytes())
        assert outs[0] == outs[1] == outs[2]

    def test_trace(self, trivial, capsys):
        run("solve", trivial, "--trace")
        assert "node " in capsys.readouterr().err

    def test_check_round_trip(self, tmp_path, capsys):
        inst = tmp_path / "r.json"
        run("gen", "random", "--n", 4, "--seed", 5, "--out", inst)
        sol_path, rep_path = tmp_path / "sol.json", tmp_path / "rep.json"
        if run("solve", inst, "--out", sol_path) != cli.EXIT_OK:
            pytest.skip("random instance infeasible")
        capsys.readouterr()
        assert run("check", inst, sol_path, "--out", rep_path) == cli.EXIT_OK
        assert load(rep_path) == load(sol_path)["report"]
        assert "within_bound" in capsys.readouterr().out


class TestOtherCommands:
    def test_oracle_two_row(self, tmp_path):
        inst, out = tmp_path / "p.json", tmp_path / "o.json"
        run("gen", "2row", "--a", 2, 3, 4, "--a0", 5, "--N", 2, "--out", inst)
        assert run("oracle", inst, "--out", out) == cli.EXIT_OK
        sol = load(out)
        assert sol["objective"] == pytest.approx(2.0, abs=1e-7)
        assert sol["z"] == [1, 1, 0]

    def test_oracle_infeasible(self, tmp_path):
        inst = tmp_path / "p.json"
        run("gen", "w3", "--a", 2, 4, 6, "--a0", 5, "--out", inst)
        assert run("oracle", inst) == cli.EXIT_INFEASIBLE

    def test_decompose_then_solve(self, tmp_path):
        inst, td = tmp_path / "p.json", tmp_path / "td.json"
        run("gen", "random", "--n", 5, "--seed", 7, "--out", inst)
        assert run("decompose", inst, "--out", td) == cli.EXIT_OK
        q, _ = model.normalize(cli.load_problem(inst))
        rbd = graph.load_decomposition(td)
        graph.validate_rooted(q, rbd)
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        run("solve", inst, "--out", a)
        run("solve", inst, "--td", td, "--out", b)
        assert a.read_bytes() == b.read_bytes()

    def test_gen_w3_companion(self, tmp_path):
        inst, td = tmp_path / "p.json", tmp_path / "td.json"
        run("gen", "w3", "--a", 2, 3, 4, "--a0", 5, "--out", inst, "--td-out", td)
        assert run("solve", inst, "--td", td, "--epsilon-denominator", 2, "--threads", 1) == cli.EXIT_OK

    def test_gen_banded_companion(self, tmp_path):
        inst, td = tmp_path / "p.json", tmp_path / "td.json"
        assert run("gen", "banded", "--n", 5, "--k", 1, "--seed", 2, "--out", inst, "--td-out", td) == cli.EXIT_OK
        p = cli.load_problem(inst)
        dec = graph.load_decomposition(td)
        graph.validate_decomposition(graph.build_intersection_graph(p), dec)

    def test_gen_needs_items(self, capsys):
        with pytest.raises(SystemExit) as exc:
            run("gen", "w3")
        assert exc.value.code == cli.EXIT_ERROR

    def test_usage_error_is_not_infeasible(self):
        with pytest.raises(SystemExit) as exc:
            run("solve", "--bogus")
        assert exc.value.code == cli.EXIT_ERROR

    def test_feas_tol_from_environment(self, trivial, monkeypatch, tmp_path):
        monkeypatch.setenv("QIB_FEAS_TOL", "1e-7")
        assert run("solve", trivial, "--out", tmp_path / "s.json") == cli.EXIT_OK


def test_console_entry(trivial):
    res = subprocess.run([sys.executable, "-m", "qib.cli", "solve", str(trivial)], capture_output=True, text=True)
    assert res.returncode == 0
    assert json.loads(res.stdout)["status"] == "solution"
