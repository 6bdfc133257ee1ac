"""
Desk-scale acceptance run on the smoke configuration.

These runs take minutes; select them with ``-m slow``.
"""

import os
import sys
import time

import pandas as pd
import pytest
from sklearn.metrics import adjusted_rand_score

# Add src to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', '..', 'src'))
from declineforge.config import apply_overrides, load_config
from declineforge.pipeline import BRAIN_VOLUMETRICS_ROW, VIT_FC_ROW, Context, cmd_run_all, read_labels
from declineforge.synthcohort import read_truth_csv

SMOKE_CONFIG = os.path.join(os.path.dirname(__file__), '..', '..', 'configs', 'smoke.json')


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    cfg = apply_overrides(load_config(SMOKE_CONFIG), workspace=tmp_path_factory.mktemp("smoke") / "ws")
    ctx = Context(cfg=cfg)
    start = time.time()
    cmd_run_all(ctx)
    return ctx, time.time() - start


class TestSmokeRun:
    """Whole pipeline on the smoke cohort."""

    @pytest.mark.slow
    def test_finishes_in_reasonable_time(self, smoke_run):
        _, duration = smoke_run
        assert duration < 1800.0, f"smoke run took {duration:.0f} seconds"

    @pytest.mark.slow
    def test_clusters_track_planted_groups(self, smoke_run):
        ctx, _ = smoke_run
        truth = read_truth_csv(ctx.path("synth", "truth.csv"))
        labels = read_labels(ctx.path("cluster", "assignments.csv"))
        ids = list(truth)
        ari = adjusted_rand_score([truth[s] for s in ids], [int(labels[s]) for s in ids])
        assert ari >= 0.9, f"ARI {ari:.3f}"

    @pytest.mark.slow
    def test_reconstruction_improves(self, smoke_run):
        ctx, _ = smoke_run
        history = pd.read_csv(ctx.path("pretrain", "history.csv"))
        assert len(history) == ctx.cfg.pretraining.train.epochs
        assert history["train_mse"].iloc[-1] < history["train_mse"].iloc[0]

    @pytest.mark.slow
    def test_repetitions_recorded(self, smoke_run):
        ctx, _ = smoke_run
        runs = pd.read_csv(ctx.path("evaluate", "runs.csv"))
        assert sorted(runs["repetition"].unique()) == [0, 1, 2]
        methods = pd.read_csv(ctx.path("evaluate", "methods_auc.csv"))
        assert "CNN (single-rate)" in set(methods["method"])


def _auc(methods, method, cls):
    row = methods[(methods["method"] == method) & (methods["class"] == cls)]
    assert len(row) == 1, f"{method} / {cls}"
    return float(row["mean"].iloc[0])


class TestCrossModalPattern:
    """Imaging and tabular markers each win the group they carry signal for."""

    @pytest.mark.slow
    def test_imaging_separates_stable(self, smoke_run):
        ctx, _ = smoke_run
        methods = pd.read_csv(ctx.path("evaluate", "methods_auc.csv"))
        stable = _auc(methods, VIT_FC_ROW, "Stable")
        assert stable >= 0.85, f"ViT + FC Stable AUC {stable:.3f}"
        assert stable > _auc(methods, BRAIN_VOLUMETRICS_ROW, "Stable")

    @pytest.mark.slow
    def test_volumetrics_separate_severe(self, smoke_run):
        ctx, _ = smoke_run
        methods = pd.read_csv(ctx.path("evaluate", "methods_auc.csv"))
        severe = _auc(methods, BRAIN_VOLUMETRICS_ROW, "Severe")
        assert severe >= 0.85, f"Brain Volumetrics Severe AUC {severe:.3f}"
        assert severe > _auc(methods, VIT_FC_ROW, "Severe")
