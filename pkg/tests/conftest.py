import numpy as np
import pytest

from dynmf.cube import UsageCube
from dynmf.model import LatentModel


def random_model(rng, N, M, T, K, scale=1.0):
    return LatentModel(
        rng.normal(0, scale, (N, K)),
        rng.normal(0, scale, (M, K)),
        rng.normal(0, scale, (T, N, K)),
    )


def random_cube(rng, N, M, T, mask_fraction=0.0):
    values = rng.normal(size=(T, N, M))
    mask = None
    if mask_fraction:
        mask = rng.random((T, N, M)) >= mask_fraction
        values = np.where(mask, values, 0.0)
    return UsageCube(
        [str(n) for n in range(N)], [str(m) for m in range(M)], np.arange(T), values, mask
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance reporting ----------------------------------------------------

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


# -- end-to-end CLI pipeline ---------------------------------------------------

SMALL_SPEC = {
    "N": 8, "M": 5, "T": 40, "K_true": 2, "noise_std": 0.1, "seed": 11,
    "random_injections": {"count": 3, "duration": 2, "magnitude": 8.0},
}


def cli_pipeline(workdir, spec=SMALL_SPEC, iters=300):
    """Run every subcommand once inside ``workdir`` using relative paths."""
    import csv
    import json
    import os

    from dynmf.anomaly import Event, save_events
    from dynmf.cli import main
    from dynmf.cube import load_cube, write_csv
    from dynmf.synth import random_events

    old = os.getcwd()
    os.chdir(workdir)
    try:
        with open("spec.json", "w") as fh:
            json.dump(spec, fh)
        fit_opts = ["--iters", str(iters), "--trace-every", "50"]
        assert main(["synth", "--spec", "spec.json", "--output", "cube", "--truth", "truth.csv",
                     "--model", "planted"]) == 0
        cube = load_cube("cube")
        write_csv(cube, "raw.csv", "long")
        starts = {}
        with open("truth.csv", newline="") as fh:
            for row in csv.DictReader(fh):
                starts.setdefault(row["injection"], Event(row["node"], int(row["timestamp"]), "segfault"))
        save_events(list(starts.values()) + random_events(cube.node_ids, cube.timestamps, 10, seed=1),
                    "events.csv")
        steps = [
            ["ingest", "--input", "raw.csv", "--normalize", "--output", "ingested"],
            ["fit", "--cube", "cube", "--k", "2", *fit_opts, "--output", "model", "--trace", "trace.csv"],
            ["sweep", "--cube", "cube", "--ks", "1,2", *fit_opts, "--output-dir", "sweep"],
            ["score", "--cube", "cube", "--model", "model", "--output", "scores.csv"],
            ["flag", "--scores", "scores.csv", "--method", "quantile:0.95", "--output", "flags.csv"],
            ["align", "--scores", "flags.csv", "--events", "events.csv", "--output", "align.csv"],
            ["project", "--model", "model", "--output", "metrics_pca.csv"],
            ["project", "--model", "model", "--target", "nodes-static", "--output", "nodes_pca.csv"],
            ["correlate", "--model", "model", "--output", "corr.csv"],
            ["baseline", "--cube", "cube", "--rank", "2", "--iters", "20", "--flag", "quantile:0.95",
             "--output", "cp_scores.csv"],
            ["eval", "--scores", "flags.csv", "--truth", "truth.csv", "--flag", "zscore:3", "--output", "metrics.csv"],
        ]
        for argv in steps:
            assert main(argv) == 0, argv
    finally:
        os.chdir(old)
