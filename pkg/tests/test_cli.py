import json
import os
import subprocess
import sys
from pathlib import Path

import pytest

from arcreg import cli
from arcreg.arc import ArcCurve

GOLDEN = Path(__file__).parent / "golden"
SUBCOMMANDS = ["synth", "register", "sweep", "arc-build", "arc-compare", "arc-plot"]
FAST = ["--iterations", "15", "--levels", "2"]


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def summary(out):
    lines = out.strip().splitlines()
    assert len(lines) == 1
    return json.loads(lines[0])


def tree_bytes(root, skip=("timing.json",)):
    root = Path(root)
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and p.name not in skip}


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert cli.main(["synth", "--pairs", "2", "--dims", "16", "--seed", "7", "--labels", "2", "--out", str(out)]) == 0
    return out / "manifest.json"


@pytest.fixture(scope="module")
def swept(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("sweep")
    assert cli.main(["sweep", "--manifest", str(dataset), "--model", "disp", "--lambdas", "0.0,0.1,1.0",
                     "--jobs", "1", "--out", str(out), *FAST]) == 0
    return out


class TestSynth:
    def test_layout(self, dataset):
        entries = json.loads(dataset.read_text())
        assert [e["pair_id"] for e in entries] == ["pair_000", "pair_001"]
        assert [e["seed"] for e in entries] == [7, 8]
        for e in entries:
            for key in ("moving", "fixed", "moving_labels", "fixed_labels", "fixed_landmarks",
                        "moving_landmarks", "gt_disp"):
                assert (dataset.parent / e[key]).is_file()
        meta = json.loads((dataset.parent / "dataset.json").read_text())
        assert meta["dims"] == [16, 16, 16] and meta["seed"] == 7

    def test_summary_and_idempotence(self, capsys, tmp_path):
        code, out, _ = run(capsys, "synth", "--pairs", 1, "--dims", "12x10x8", "--out", tmp_path)
        s = summary(out)
        assert code == 0 and s["command"] == "synth" and s["status"] == "ok" and s["dims"] == [12, 10, 8]
        first = tree_bytes(tmp_path)
        assert run(capsys, "synth", "--pairs", 1, "--dims", "12x10x8", "--out", tmp_path)[0] == 0
        assert tree_bytes(tmp_path) == first


class TestRegister:
    def test_outputs(self, capsys, dataset, tmp_path):
        code, out, _ = run(capsys, "register", "--manifest", dataset, "--pair", "pair_001", "--model", "ffd",
                           "--lambda", "0.1", "--out", tmp_path, *FAST)
        assert code == 0
        s = summary(out)
        assert s["pair_id"] == "pair_001" and s["config"]["model_kind"] == "ffd"
        names = {p.name for p in tmp_path.iterdir()}
        assert names == {"params.grid", "params.json", "displacement.grid", "run.json", "metrics.json",
                         "metrics.csv", "timing.json"}
        sidecar = json.loads((tmp_path / "params.json").read_text())
        assert sidecar["kind"] == "ffd" and sidecar["image_dims"] == [16, 16, 16]
        run_rec = json.loads((tmp_path / "run.json").read_text())
        assert run_rec["config"]["lambda"] == 0.1

    @pytest.mark.parametrize("model", ["disp", "svf", "ffd"])
    def test_idempotent(self, capsys, dataset, tmp_path, model):
        argv = ["register", "--manifest", dataset, "--pair", "pair_000", "--model", model, "--out", tmp_path, *FAST]
        assert run(capsys, *argv)[0] == 0
        first = tree_bytes(tmp_path)
        assert run(capsys, *argv)[0] == 0
        assert tree_bytes(tmp_path) == first

    def test_negative_lambda(self, capsys, dataset, tmp_path):
        code, out, err = run(capsys, "register", "--manifest", dataset, "--pair", "pair_000", "--model", "disp",
                             "--lambda", "-1", "--out", tmp_path)
        assert code == 1 and out == ""
        assert err.strip().splitlines() == ["error: lambda must be ≥ 0"]

    def test_unknown_pair(self, capsys, dataset, tmp_path):
        code, _, err = run(capsys, "register", "--manifest", dataset, "--pair", "nope", "--model", "disp",
                           "--out", tmp_path)
        assert code == 1 and "nope" in err

    def test_missing_manifest(self, capsys, tmp_path):
        code, _, err = run(capsys, "register", "--manifest", tmp_path / "none.json", "--pair", "p",
                           "--model", "disp", "--out", tmp_path)
        assert code == 1 and len(err.strip().splitlines()) == 1


class TestSweep:
    def test_records(self, swept):
        recs = sorted((swept / "records").glob("*.json"))
        assert [p.name for p in recs] == [f"pair_00{i}__lam00{j}.json" for i in range(2) for j in range(3)]
        assert len(list((swept / "runs").glob("*.json"))) == 6
        rows = (swept / "records.csv").read_text().splitlines()
        assert rows[0] == "method,pair_id,lambda,dice_mean,tre_mean_mm,folding_pct,std_log_j,converged,warm_start"
        assert len(rows) == 7
        meta = json.loads((swept / "sweep.json").read_text())
        assert meta["mode"] == "cold" and meta["lambdas"] == [0.0, 0.1, 1.0]
        assert "lambda" not in meta["config"] and meta["config"]["iterations_per_level"] == 15

    def test_idempotent(self, dataset, swept, tmp_path):
        argv = ["sweep", "--manifest", str(dataset), "--model", "disp", "--lambdas", "0.0,0.1,1.0",
                "--jobs", "1", "--out", str(tmp_path), *FAST]
        assert cli.main(argv) == 0
        assert tree_bytes(tmp_path) == tree_bytes(swept)

    def test_warm(self, capsys, dataset, tmp_path):
        code, out, _ = run(capsys, "sweep", "--manifest", dataset, "--model", "svf", "--warm", "--points", 4,
                           "--lambdas", "0.1", "--jobs", 1, "--out", tmp_path, *FAST)
        assert code == 0 and summary(out)["mode"] == "continuation"
        recs = [json.loads(p.read_text()) for p in sorted((tmp_path / "records").glob("*.json"))]
        assert len(recs) == 8
        assert sorted({r["lambda"] for r in recs}) == [0.0, 0.0001, 0.1, 1.0]
        assert sum(r["warm_start"] for r in recs) == 6

    def test_duplicate_lambda(self, capsys, dataset, tmp_path):
        code, _, err = run(capsys, "sweep", "--manifest", dataset, "--model", "disp", "--lambdas", "0.1,0.1",
                           "--out", tmp_path)
        assert code == 1 and "duplicate lambda" in err

    def test_jobs_env_fallback(self, monkeypatch, dataset, tmp_path):
        monkeypatch.setenv("ARC_REG_JOBS", "0")
        assert cli.main(["sweep", "--manifest", str(dataset), "--model", "disp", "--out", str(tmp_path)]) == 1

    def test_runtime_failure_writes_trace(self, capsys, monkeypatch, dataset, tmp_path):
        def boom(*args, **kwargs):
            raise RuntimeError("worker pool died")
        monkeypatch.setattr(cli, "sweep", boom)
        code, _, err = run(capsys, "sweep", "--manifest", dataset, "--model", "disp", "--out", tmp_path)
        assert code == 2
        trace = tmp_path / cli.TRACE_FILE
        assert f"(trace: {trace})" in err and "worker pool died" in trace.read_text()


class TestArc:
    def test_build_compare_plot(self, capsys, swept, tmp_path):
        curve = tmp_path / "curve.json"
        code, out, _ = run(capsys, "arc-build", "--records", swept, "--label", "disp", "--out", curve)
        assert code == 0 and summary(out)["n_points"] == 3
        c = ArcCurve.from_dict(json.loads(curve.read_text()))
        assert c.method_label == "disp" and len(c.points) == 3

        table = tmp_path / "table.csv"
        code, out, _ = run(capsys, "arc-compare", "--curves", curve, curve, "--thresholds", "0.0,0.3", "--out", table)
        assert code == 0
        rows = table.read_text().splitlines()
        assert len(rows) == 5 and rows[1].split(",")[2] == "disp#0"

        svg = tmp_path / "plot.svg"
        code, _, _ = run(capsys, "arc-plot", "--curves", curve, "--refline", "0.3", "--out", svg)
        text = svg.read_text()
        assert code == 0 and text.count('class="threshold"') == 1 and 'stroke-dasharray="6,4"' in text
        first = svg.read_bytes()
        assert run(capsys, "arc-plot", "--curves", curve, "--refline", "0.3", "--out", svg)[0] == 0
        assert svg.read_bytes() == first
        assert run(capsys, "arc-plot", "--curves", curve, "--no-refline", "--out", svg)[0] == 0
        assert "threshold" not in svg.read_text()

    def test_build_other_axes(self, capsys, swept, tmp_path):
        out = tmp_path / "c.json"
        assert run(capsys, "arc-build", "--records", swept / "records", "--align", "tre", "--regul", "stdlogj",
                   "--out", out)[0] == 0
        d = json.loads(out.read_text())
        assert (d["alignment_metric"], d["regularity_metric"]) == ("tre", "stdlogj")

    def test_build_empty_dir(self, capsys, tmp_path):
        code, _, err = run(capsys, "arc-build", "--records", tmp_path, "--out", tmp_path / "c.json")
        assert code == 1 and "no record files" in err

    def test_compare_axes_mismatch(self, capsys, swept, tmp_path):
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        run(capsys, "arc-build", "--records", swept, "--out", a)
        run(capsys, "arc-build", "--records", swept, "--regul", "stdlogj", "--out", b)
        code, _, err = run(capsys, "arc-compare", "--curves", a, b, "--thresholds", "0.3", "--out", tmp_path / "t.csv")
        assert code == 1 and "axes" in err


class TestUsage:
    @pytest.mark.parametrize("argv", [
        ["synth", "--pairs", "1", "--out", "x", "--bogus"],
        ["frobnicate"],
        [],
        ["synth", "--pairs", "0", "--out", "x"],
        ["synth", "--pairs", "1", "--dims", "4", "--out", "x"],
        ["register", "--manifest", "m", "--pair", "p", "--model", "tps", "--out", "x"],
        ["sweep", "--manifest", "m", "--model", "disp", "--lambdas", "a,b", "--out", "x"],
        ["arc-plot", "--curves", "c.json", "--width", "-3", "--out", "x.svg"],
    ])
    def test_exit_one(self, capsys, argv):
        code, out, err = run(capsys, *argv)
        assert code == 1 and out == ""
        assert len(err.strip().splitlines()) == 1 and err.startswith("error: ")

    def test_version(self, capsys):
        with pytest.raises(SystemExit) as info:
            cli.main(["--version"])
        assert info.value.code == 0

    @pytest.mark.parametrize("command", SUBCOMMANDS)
    def test_help_golden(self, command):
        env = dict(os.environ, COLUMNS="100")
        text = subprocess.run([sys.executable, "-m", "arcreg.cli", command, "--help"], env=env,
                              capture_output=True, text=True, check=True).stdout
        assert text == (GOLDEN / f"help_{command}.txt").read_text()

    @pytest.mark.parametrize("command", SUBCOMMANDS)
    def test_help_lists_every_flag(self, command):
        parser = cli.build_parser()
        sub = next(a for a in parser._actions if hasattr(a, "choices") and a.choices and command in a.choices)
        subparser = sub.choices[command]
        text = subparser.format_help()
        for action in subparser._actions:
            for flag in action.option_strings:
                assert flag in text
            if action.option_strings and action.dest != "help":
                assert action.help


def test_synth_then_sweep_default_lambdas(tmp_path):
    data, out = tmp_path / "d", tmp_path / "s"
    assert cli.main(["synth", "--pairs", "2", "--dims", "48", "--seed", "7", "--out", str(data)]) == 0
    assert cli.main(["sweep", "--manifest", str(data / "manifest.json"), "--model", "disp",
                     "--lambdas", "0.0,0.001,0.005,0.1,0.2,0.5,1.0", "--out", str(out)]) == 0
    assert len(list((out / "records").glob("*.json"))) == 14
