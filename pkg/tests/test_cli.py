import json
import subprocess
import sys

import pytest

from qhml import cli
from qhml.data import make_teacher_dataset, write_dataset


@pytest.fixture
def plan_path(tmp_path):
    write_dataset(*make_teacher_dataset(60, 8, seed=1, n_flat=1), tmp_path / "data", drug="Toy")
    plan = {
        "datasets": {"Toy": {"expression": "data/expression.csv", "response": "data/response.csv",
                             "format": "data/format.json"}},
        "configs": [{"n1": 2, "n2": 1, "n3": 1, "lr": 0.03}],
        "methods": ["classic", "proposed-multi"],
        "repeats": 1, "folds": 2, "epochs": 2, "batch_size": 16, "hidden1": 8, "hidden2": 8,
        "default_config": {"n1": 2, "n2": 1, "n3": 1, "lr": 0.03},
        "a_values": [20], "r_values": ["pi/2"],
        "out": "results",
    }
    path = tmp_path / "plan.json"
    path.write_text(json.dumps(plan))
    return path


def run(*argv):
    return cli.main([str(a) for a in argv])


class TestCommands:
    def test_grid_then_compare(self, plan_path, capsys):
        assert run("grid-search", "--plan", plan_path, "--no-figures") == 0
        out = plan_path.parent / "results"
        assert (out / "Toy" / "grid" / "ranking.csv").exists()
        assert not (out / "Toy" / "grid" / "curves.png").exists()
        assert run("compare", "--plan", plan_path, "--use-ranking", "--method", "proposed-multi") == 0
        assert capsys.readouterr().out.splitlines()[-1].startswith("proposed-multi,")
        assert not (out / "failures.json").exists()

    def test_out_and_seed_override(self, plan_path, tmp_path):
        assert run("compare", "--plan", plan_path, "--out", tmp_path / "o1", "--seed", "1") == 0
        assert run("compare", "--plan", plan_path, "--out", tmp_path / "o2", "--seed", "2") == 0
        a = (tmp_path / "o1" / "comparison.csv").read_text()
        b = (tmp_path / "o2" / "comparison.csv").read_text()
        assert a != b
        assert not (plan_path.parent / "results").exists()

    def test_repeats_override(self, plan_path, tmp_path):
        assert run("compare", "--plan", plan_path, "--out", tmp_path / "o", "--repeats", "2") == 0
        rows = (tmp_path / "o" / "comparison.csv").read_text().splitlines()
        assert len(rows) == 1 + 2 * 2

    def test_sweeps_write_figures(self, plan_path, tmp_path):
        for which in ("a", "r"):
            assert run(f"sweep-{which}", "--plan", plan_path, "--out", tmp_path) == 0
            assert (tmp_path / f"sweep_{which}.csv").exists() and (tmp_path / f"sweep_{which}.png").exists()

    def test_train_one_and_emit_dist(self, plan_path, tmp_path, capsys):
        assert run("train-one", "--plan", plan_path, "--out", tmp_path, "--config", "2,2,1,0.01") == 0
        summary = json.loads(capsys.readouterr().out)
        assert summary["config"] == {"n1": 2, "n2": 2, "n3": 1, "lr": 0.01}
        ckpt = tmp_path / "Toy" / "train-one" / "proposed-multi.ckpt.json"
        split = tmp_path / "Toy" / "train-one" / "proposed-multi.split.json"
        assert run("train-one", "--plan", plan_path, "--out", tmp_path / "replay", "--config", "2,2,1,0.01",
                   "--split-plan", split) == 0
        replay = json.loads(capsys.readouterr().out)
        assert replay["test_auc"] == summary["test_auc"]
        assert run("emit-dist", "--plan", plan_path, "--out", tmp_path, "--checkpoint", ckpt, "--samples", "10") == 0
        dist = tmp_path / "Toy" / "distribution"
        assert len((dist / "distribution.csv").read_text().splitlines()) == 1 + 10 * 4
        assert (dist / "distribution.png").exists()

    def test_emit_curves(self, plan_path, tmp_path):
        assert run("grid-search", "--plan", plan_path, "--out", tmp_path, "--no-figures") == 0
        curves = tmp_path / "Toy" / "grid" / "curves.csv"
        before = curves.read_bytes()
        curves.unlink()
        assert run("emit-curves", "--plan", plan_path, "--out", tmp_path) == 0
        assert curves.read_bytes() == before
        assert (tmp_path / "Toy" / "grid" / "curves.png").exists()

    def test_make_synthetic(self, tmp_path, capsys):
        assert run("make-synthetic", "--out", tmp_path, "--samples", "40", "--genes", "6") == 0
        plan = json.loads((tmp_path / "plan.json").read_text())
        assert plan["a"] == 20 and plan["r"] == "pi/2"
        assert len((tmp_path / "data" / "expression.csv").read_text().splitlines()) == 41


class TestExitCodes:
    def test_bad_plan_key(self, tmp_path, capsys):
        path = tmp_path / "plan.json"
        path.write_text(json.dumps({"colour": "red"}))
        assert run("grid-search", "--plan", path) == 2
        err = json.loads(capsys.readouterr().err)
        assert "colour" in err["error"]
        assert json.loads((tmp_path / "results" / "failures.json").read_text()) == err

    def test_missing_plan(self, tmp_path):
        assert run("compare", "--plan", tmp_path / "nope.json") == 2

    def test_bad_config_flag(self, plan_path, tmp_path):
        assert run("train-one", "--plan", plan_path, "--out", tmp_path, "--config", "2,2") == 2

    def test_partial_failure_exits_1(self, plan_path, tmp_path, capsys):
        plan = json.loads(plan_path.read_text())
        plan["configs"].append({"n1": 0, "n2": 1, "n3": 1, "lr": 0.03})
        plan["max_failure_fraction"] = 0.9
        plan_path.write_text(json.dumps(plan))
        assert run("grid-search", "--plan", plan_path, "--out", tmp_path, "--no-figures") == 1
        summary = json.loads((tmp_path / "failures.json").read_text())
        assert len(summary["failures"]) == 2
        assert all("n1=0" in f["run"] for f in summary["failures"])

    def test_abort_exits_2(self, plan_path, tmp_path):
        plan = json.loads(plan_path.read_text())
        plan["configs"] = [{"n1": 0, "n2": 1, "n3": 1, "lr": 0.03}]
        plan_path.write_text(json.dumps(plan))
        assert run("grid-search", "--plan", plan_path, "--out", tmp_path) == 2
        summary = json.loads((tmp_path / "failures.json").read_text())
        assert "failed" in summary["error"]

    def test_console_script(self):
        res = subprocess.run([sys.executable, "-m", "qhml.cli", "--version"], capture_output=True, text=True)
        assert res.returncode == 0 and res.stdout.startswith("qhml ")
