import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from dynmf.cli import main
from dynmf.cube import load_cube
from dynmf.model import load_model

from conftest import cli_pipeline


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    path = tmp_path_factory.mktemp("pipeline")
    cli_pipeline(path)
    return path


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_usage_errors_exit_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["fit"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 2


def test_version():
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0


def test_runtime_error_exits_1(tmp_path, capsys):
    assert main(["fit", "--cube", str(tmp_path / "missing"), "--output", str(tmp_path / "m")]) == 1
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["command"] == "fit" and err["message"]


def test_bad_flag_method_exits_1(workdir, capsys):
    assert main(["flag", "--scores", str(workdir / "scores.csv"), "--method", "quantile:2",
                 "--output", str(workdir / "bad.csv")]) == 1
    assert "error" in json.loads(capsys.readouterr().err)


def test_console_script_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "dynmf", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and "dynmf" in proc.stdout


def test_synth_outputs(workdir):
    cube = load_cube(workdir / "cube")
    assert cube.shape == (40, 8, 5)
    planted = load_model(workdir / "planted")
    assert planted.K == 2
    assert read_rows(workdir / "truth.csv")
    manifest = json.loads((workdir / "cube" / "run_manifest.json").read_text())
    assert manifest["subcommand"] == "synth"
    assert manifest["config"]["resolved_spec"]["N"] == 8


def test_ingest_output_is_normalized(workdir):
    cube = load_cube(workdir / "ingested")
    assert cube.is_normalized
    np.testing.assert_allclose(cube.values.mean(axis=(0, 1)), 0.0, atol=1e-12)


def test_fit_outputs(workdir):
    model = load_model(workdir / "model")
    assert (model.N, model.M, model.T, model.K) == (8, 5, 40, 2)
    trace = read_rows(workdir / "trace.csv")
    assert [int(r["iteration"]) for r in trace] == list(range(0, 301, 50))
    manifest = json.loads((workdir / "model" / "run_manifest.json").read_text())
    assert manifest["results"]["n_iter"] == 300
    assert float(trace[-1]["objective"]) == manifest["results"]["final_objective"]
    assert len(manifest["inputs"]["cube"]["sha256"]) == 64


def test_sweep_outputs(workdir):
    rows = read_rows(workdir / "sweep" / "summary.csv")
    assert [r["k"] for r in rows] == ["1", "2"]
    assert (workdir / "sweep" / "trace_0_k1.csv").exists()
    assert (workdir / "sweep" / "trace_1_k2.csv").exists()


def test_score_and_flag_outputs(workdir):
    scores = read_rows(workdir / "scores.csv")
    assert len(scores) == 40 * 8
    assert all(r["flag"] == "" for r in scores)
    flags = read_rows(workdir / "flags.csv")
    assert {r["flag"] for r in flags} == {"0", "1"}
    assert (workdir / "flags.csv.manifest.json").exists()


def test_align_outputs(workdir):
    rows = read_rows(workdir / "align.csv")
    assert len(rows) == 13
    summary = read_rows(workdir / "align_summary.csv")
    assert {r["error_type"] for r in summary} == {"segfault", "write_error"}


def test_project_and_correlate_outputs(workdir):
    assert len(read_rows(workdir / "metrics_pca.csv")) == 5
    assert len(read_rows(workdir / "nodes_pca.csv")) == 8
    with open(workdir / "corr.csv") as fh:
        lines = fh.read().splitlines()
    assert lines[0] == ",0,1" and len(lines) == 3


def test_baseline_and_eval_outputs(workdir):
    cp = read_rows(workdir / "cp_scores.csv")
    assert len(cp) == 320
    metrics = read_rows(workdir / "metrics.csv")
    assert "auc" in metrics[0]
    assert {r["method"] for r in metrics} == {"given", "zscore:3"}
    assert 0.0 <= float(metrics[0]["auc"]) <= 1.0


def test_binary_storage_round_trip(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"N": 3, "M": 2, "T": 4, "K_true": 1}))
    assert main(["synth", "--spec", str(spec), "--output", str(tmp_path / "c"), "--storage", "binary",
                 "--seed", "5"]) == 0
    assert (tmp_path / "c" / "values.bin").stat().st_size == 3 * 2 * 4 * 8
    cube = load_cube(tmp_path / "c")
    manifest = json.loads((tmp_path / "c" / "run_manifest.json").read_text())
    assert manifest["config"]["resolved_spec"]["seed"] == 5
    assert cube.shape == (4, 3, 2)


@pytest.mark.slow
def test_benchmark_pipeline_smoke(tmp_path):
    from dynmf.synth import standard_benchmark

    spec = tmp_path / "bench.json"
    spec.write_text(json.dumps(standard_benchmark(seed=0).to_dict()))
    p = lambda name: str(tmp_path / name)
    assert main(["synth", "--spec", p("bench.json"), "--output", p("cube"), "--truth", p("truth.csv")]) == 0
    assert main(["fit", "--cube", p("cube"), "--k", "5", "--iters", "3000", "--output", p("model")]) == 0
    assert main(["score", "--cube", p("cube"), "--model", p("model"), "--output", p("scores.csv")]) == 0
    assert main(["eval", "--scores", p("scores.csv"), "--truth", p("truth.csv"), "--flag", "quantile:0.99",
                 "--output", p("metrics.csv")]) == 0
    (row,) = read_rows(tmp_path / "metrics.csv")
    assert row["n_cells"] == str(50 * 200) and float(row["auc"]) > 0.5
