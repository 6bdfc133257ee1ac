"""
Trajectory clustering on full-size synthetic cohorts.

Each test clusters 200 subjects with ten restarts; select them with ``-m slow``.
"""

import os
import sys

import numpy as np
import pytest
from sklearn.metrics import adjusted_rand_score

# Add src to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', '..', 'src'))
from declineforge.synthcohort import CohortSpec, gen_trajectories
from declineforge.trajectory import assign_labels, elbow_curve, kmeans_dtw


def _cohort(**overrides):
    pairs = gen_trajectories(CohortSpec(n_subjects=200, seed=0, **overrides))
    return [t for t, _ in pairs], {t.subject_id: g for t, g in pairs}


@pytest.fixture(scope="module")
def noiseless_cohort():
    return _cohort(score_noise=0.0, visit_jitter_months=0.0)


@pytest.fixture(scope="module")
def noisy_cohort():
    return _cohort()


def _ari(trajectories, groups, model):
    ids = [t.subject_id for t in trajectories]
    return adjusted_rand_score([groups[s] for s in ids], [model.assignments[s] for s in ids])


class TestRecovery:
    """Planted progression groups are found again."""

    @pytest.mark.slow
    def test_noiseless_cohort_is_recovered_exactly(self, noiseless_cohort):
        trajectories, groups = noiseless_cohort
        model = kmeans_dtw(trajectories, 4, restarts=10, seed=2)
        assert _ari(trajectories, groups, model) == pytest.approx(1.0)
        labels = assign_labels(model)
        assert all(int(labels[s]) == g for s, g in groups.items())

    @pytest.mark.slow
    def test_default_noise_stays_close(self, noisy_cohort):
        trajectories, groups = noisy_cohort
        model = kmeans_dtw(trajectories, 4, restarts=10, seed=2)
        ari = _ari(trajectories, groups, model)
        assert ari >= 0.90, f"ARI {ari:.3f}"


class TestElbow:
    """Shape of the inertia curve for k = 1..8."""

    @pytest.mark.slow
    def test_noiseless_curve_bends_at_four(self, noiseless_cohort):
        trajectories, _ = noiseless_cohort
        inertias = np.array([i for _, i in elbow_curve(trajectories, 8, restarts=10, seed=2)])
        drops = -np.diff(inertias)
        assert np.all(drops >= -1e-9)
        # drops[2] is k=3 -> 4, drops[3] is k=4 -> 5
        assert drops[2] >= 2.0 * drops[3]

    @pytest.mark.slow
    def test_noisy_curve_never_increases(self, noisy_cohort):
        trajectories, _ = noisy_cohort
        inertias = np.array([i for _, i in elbow_curve(trajectories, 8, restarts=10, seed=2)])
        assert np.all(np.diff(inertias) <= 1e-9)
