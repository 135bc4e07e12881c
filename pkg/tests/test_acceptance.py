"""Default-suite experiments over seeds 0, 1 and 2 (pytest --runslow)."""
import os
import time

import pandas as pd
import pytest

from vlreward import cli
from vlreward.config import load_config
from vlreward.evalbench import AVERAGE

SEEDS = (0, 1, 2)
WALL_CLOCK_LIMIT = 15 * 60

pytestmark = pytest.mark.slow


@pytest.fixture(scope="module")
def reports(tmp_path_factory):
    results = {}
    for seed in SEEDS:
        out = tmp_path_factory.mktemp(f"seed{seed}")
        cfg = load_config(environ={}, seed=seed, output_dir=str(out), jobs=min(4, os.cpu_count() or 1))
        start = time.monotonic()
        cli.cmd_all(cfg)
        elapsed = time.monotonic() - start
        results[seed] = (pd.read_csv(out / "eval" / "report.csv"), elapsed)
    return results


def average_accuracy(report, model):
    rows = report[(report["model"] == model) & (report["metric"] == "accuracy") & (report["task"] == AVERAGE)]
    return rows["value"].item()


def one_stage_voc(report, model):
    rows = report[(report["model"] == model) & (report["metric"] == "voc") & report["task"].str.startswith("press")]
    assert len(rows) > 0
    return rows["value"].mean()


@pytest.mark.parametrize("seed", SEEDS)
def test_triplet_beats_untrained_encoders(reports, seed):
    report, _ = reports[seed]
    assert average_accuracy(report, "triplet") >= average_accuracy(report, "baseline") + 10.0


@pytest.mark.parametrize("seed", SEEDS)
def test_triplet_orders_one_stage_experts(reports, seed):
    report, _ = reports[seed]
    assert one_stage_voc(report, "triplet") >= 50.0


def test_triplet_matches_liv_in_most_seeds(reports):
    wins = sum(average_accuracy(r, "triplet") >= average_accuracy(r, "liv") for r, _ in reports.values())
    assert wins >= 2


@pytest.mark.parametrize("seed", SEEDS)
def test_experiment_fits_wall_clock(reports, seed):
    _, elapsed = reports[seed]
    assert elapsed <= WALL_CLOCK_LIMIT
