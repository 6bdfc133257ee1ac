"""
Shared test configuration and fixtures for declineforge.

This file contains pytest fixtures that are available across all test modules.
"""

import os
import sys

import numpy as np
import pytest

# Add src to path so we can import the package
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from declineforge.config import PipelineConfig, parse_config
from declineforge.synthcohort import CohortSpec, gen_tabular, gen_trajectories

SMOKE_CONFIG = os.path.join(os.path.dirname(__file__), '..', 'configs', 'smoke.json')


@pytest.fixture
def rng():
    """A seeded numpy generator."""
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def clean_spec():
    """Noise-free cohort where every subject has six evenly spaced visits."""
    return CohortSpec(
        n_subjects=40,
        visit_count_range=(6, 6),
        visit_jitter_months=0.0,
        score_noise=0.0,
        volume_dims=(16, 16, 16),
        seed=11,
    )


@pytest.fixture(scope="session")
def clean_cohort(clean_spec):
    """(trajectories, planted groups) for the noise-free cohort."""
    pairs = gen_trajectories(clean_spec)
    return [t for t, _ in pairs], {t.subject_id: g for t, g in pairs}


@pytest.fixture(scope="session")
def small_spec():
    """Small default-noise cohort with 16^3 volumes."""
    return CohortSpec(n_subjects=60, volume_dims=(16, 16, 16), seed=5)


@pytest.fixture(scope="session")
def small_records(small_spec):
    pairs = gen_trajectories(small_spec)
    groups = {t.subject_id: g for t, g in pairs}
    return gen_tabular(groups, small_spec), groups


def tiny_config(workspace, **sections):
    """A pipeline configuration small enough for integration tests."""
    doc = {
        "cohort": {
            "n_subjects": 24,
            "visit_count_range": [4, 5],
            "score_noise": 0.1,
            "volume_dims": [16, 16, 16],
            "seed": 0,
        },
        "clustering": {"k_max": 4, "restarts": 2, "max_iter": 10, "dba_iterations": 3},
        "pretraining": {
            "vit": {"vol_dims": [16, 16, 16], "patch_size": 8, "embed_dim": 16, "depth": 1, "heads": 2},
            "train": {"epochs": 2, "learning_rate": 0.001, "batch_size": 8, "seed": 3},
            "monitor_size": 2,
        },
        "reduction": {"max_components": 4},
        "classifiers": {
            "gbt": {"n_rounds": 5, "max_depth": 2},
            "fc_head": {"epochs": 5, "learning_rate": 0.001, "batch_size": 8},
            "fc_hidden": [8],
            "cnn": {"channels": [2, 4, 4, 4]},
            "cnn_train": {"epochs": 1, "learning_rate": 0.001, "batch_size": 8},
            "cnn_variants": ["two_rate"],
            "tabular_ae": {"epochs": 3, "learning_rate": 0.01, "batch_size": 8},
            "feature_groups": ["cognitive_scores", "brain_volumetrics"],
        },
        "evaluation": {"repetitions": 1, "test_ratio": 0.25},
        "paths": {"workspace": str(workspace)},
    }
    for name, values in sections.items():
        doc.setdefault(name, {}).update(values)
    return parse_config(doc)


@pytest.fixture
def tiny_cfg(tmp_path):
    """Tiny pipeline config whose workspace lives under tmp_path."""
    return tiny_config(tmp_path / "ws")


@pytest.fixture
def default_cfg():
    return PipelineConfig()
