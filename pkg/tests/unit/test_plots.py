"""
Unit tests for SVG figures, report tables and run metrics.
"""

import os
import sys
import xml.etree.ElementTree as ET

import numpy as np
import pytest

# Add src to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', '..', 'src'))
from declineforge.metrics import ComparisonTable, aggregate_runs
from declineforge.models import ReconHistory
from declineforge.observability import METRICS_FILE, PipelineMetrics
from declineforge.plots import elbow_svg, recon_svg, report_table, trajectories_svg
from declineforge.synthcohort import Trajectory
from declineforge.trajectory import ClusterModel, ProgressionLabel


def _parses(svg: str) -> ET.Element:
    root = ET.fromstring(svg)
    assert root.tag.endswith("svg")
    return root


class TestFigures:
    """Rendered SVG documents."""

    @pytest.mark.unit
    def test_elbow_marks_chosen_k(self):
        svg = elbow_svg([(1, 10.0), (2, 4.0), (3, 1.0), (4, 0.5)], chosen_k=3)
        _parses(svg)
        assert svg.count("<circle") == 4
        assert "k=3 inertia=1" in svg

    @pytest.mark.unit
    def test_trajectory_panels(self):
        trajectories = [
            Trajectory("S0", [0.0, 6.0, 12.0], [0.0, 0.5, 1.0]),
            Trajectory("S1", [0.0, 6.0], [2.0, 5.0]),
        ]
        model = ClusterModel(k=2, barycenters=[np.array([0.0, 0.5, 1.0]), np.array([2.0, 5.0])],
                             assignments={"S0": 0, "S1": 1}, inertia=0.0)
        labels = {"S0": ProgressionLabel.STABLE, "S1": ProgressionLabel.SEVERE}
        svg = trajectories_svg(model, trajectories, labels)
        _parses(svg)
        assert "Stable (n=1)" in svg
        assert "Severe (n=1)" in svg

    @pytest.mark.unit
    def test_recon_with_empty_history(self):
        _parses(recon_svg(ReconHistory()))

    @pytest.mark.unit
    def test_recon_curves(self):
        svg = recon_svg(ReconHistory([0.4, 0.2, 0.1], [0.3, 0.5, 0.7]))
        _parses(svg)
        assert svg.count("<polyline") >= 2


class TestReportTable:
    """Plain-text comparison tables."""

    @pytest.mark.unit
    def test_best_cells_starred(self):
        table = ComparisonTable("Methods")
        table.add("GBT", aggregate_runs([[0.9, 0.5, None, 0.6]]))
        table.add("CNN", aggregate_runs([[0.7, 0.8, None, 0.6]]))
        text = report_table(table)
        lines = text.splitlines()
        assert lines[0] == "Methods"
        assert "Stable" in lines[1] and "Severe" in lines[1]
        gbt = next(line for line in lines if line.startswith("GBT"))
        cnn = next(line for line in lines if line.startswith("CNN"))
        assert "0.90 ± 0.00*" in gbt
        assert "0.80 ± 0.00*" in cnn
        assert "n/a" in gbt

    @pytest.mark.unit
    def test_columns_align(self):
        table = ComparisonTable("Aligned")
        table.add("A much longer method name", aggregate_runs([[0.5, 0.5, 0.5, 0.5]]))
        table.add("B", aggregate_runs([[0.6, 0.6, 0.6, 0.6]]))
        rows = report_table(table).splitlines()[3:5]
        assert len(rows[0]) == len(rows[1])


class TestPipelineMetrics:
    """Prometheus counters for stages and training."""

    @pytest.mark.unit
    def test_stage_success_and_failure(self):
        metrics = PipelineMetrics()
        with metrics.stage("synth"):
            pass
        with pytest.raises(RuntimeError):
            with metrics.stage("cluster"):
                raise RuntimeError("boom")
        assert metrics.value("declineforge_stage_runs_total", stage="synth", status="ok") == 1.0
        assert metrics.value("declineforge_stage_runs_total", stage="cluster", status="error") == 1.0
        assert metrics.value("declineforge_stage_duration_seconds_count", stage="synth") == 1.0

    @pytest.mark.unit
    def test_skipped_and_epochs(self):
        metrics = PipelineMetrics()
        metrics.skipped("embed")
        on_epoch = metrics.epoch_counter("vit")
        on_epoch(1, 0.5)
        on_epoch(2, 0.4)
        assert metrics.value("declineforge_stage_runs_total", stage="embed", status="skipped") == 1.0
        assert metrics.value("declineforge_training_epochs_total", model="vit") == 2.0
        assert metrics.value("declineforge_training_epochs_total", model="cnn") == 0.0

    @pytest.mark.unit
    def test_textfile_export(self, tmp_path):
        metrics = PipelineMetrics()
        metrics.skipped("synth")
        path = metrics.write(tmp_path)
        assert path.name == METRICS_FILE
        assert 'declineforge_stage_runs_total{stage="synth",status="skipped"} 1.0' in path.read_text()
