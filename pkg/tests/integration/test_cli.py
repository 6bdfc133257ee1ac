"""
Command-line tests: exit codes, messages and the run-all/report flow.
"""

import logging
import os
import sys

import pytest
import torch
from click.testing import CliRunner

# Add src to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', '..', 'src'))
from declineforge.cli import cli
from declineforge.manifest import RunManifest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))
from conftest import tiny_config


@pytest.fixture(autouse=True)
def restore_logging():
    """configure_logging replaces root handlers with ones bound to the runner's streams."""
    root = logging.getLogger()
    handlers, level = list(root.handlers), root.level
    yield
    root.handlers[:] = handlers
    root.setLevel(level)


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(tiny_config(tmp_path / "ws").model_dump_json(indent=2))
    return path


def _args(command, config_file, *extra):
    return ["--log-level", "WARNING", command, "--config", str(config_file), *extra]


class TestExitCodes:
    """Error classes map onto process exit codes."""

    @pytest.mark.integration
    def test_help_lists_stages(self, runner):
        result = runner.invoke(cli, ["--help"])
        assert result.exit_code == 0
        for name in ("synth", "cluster", "split", "pretrain", "embed", "evaluate", "run-all", "report"):
            assert name in result.output

    @pytest.mark.integration
    def test_missing_config_file(self, runner, tmp_path):
        result = runner.invoke(cli, ["synth", "--config", str(tmp_path / "absent.json")])
        assert result.exit_code == 2
        assert "ConfigError" in result.output

    @pytest.mark.integration
    def test_invalid_config_value(self, runner, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"evaluation": {"test_ratio": 1.5}}')
        result = runner.invoke(cli, ["synth", "--config", str(path)])
        assert result.exit_code == 2

    @pytest.mark.integration
    def test_missing_upstream_stage(self, runner, config_file):
        result = runner.invoke(cli, _args("cluster", config_file))
        assert result.exit_code == 3
        assert "synth" in result.output

    @pytest.mark.integration
    def test_rerun_needs_force(self, runner, config_file):
        assert runner.invoke(cli, _args("synth", config_file)).exit_code == 0
        second = runner.invoke(cli, _args("synth", config_file))
        assert second.exit_code == 1
        assert "--force" in second.output
        forced = runner.invoke(cli, _args("synth", config_file, "--force"))
        assert forced.exit_code == 0
        assert "synth: done" in forced.output

    @pytest.mark.integration
    def test_label_assignment_needs_four_clusters(self, runner, config_file):
        assert runner.invoke(cli, _args("synth", config_file, "--k", "3")).exit_code == 0
        result = runner.invoke(cli, _args("cluster", config_file, "--k", "3"))
        assert result.exit_code == 2

    @pytest.mark.integration
    def test_nonpositive_k(self, runner, config_file):
        assert runner.invoke(cli, _args("synth", config_file, "--k", "0")).exit_code == 2

    @pytest.mark.integration
    def test_divergence_names_the_stage(self, runner, config_file, tmp_path, mocker):
        mocker.patch("declineforge.models.mse_loss", return_value=torch.tensor(float("nan"), dtype=torch.float64))
        result = runner.invoke(cli, _args("run-all", config_file))
        assert result.exit_code == 4
        assert "in stage 'pretrain'" in result.output
        manifest = RunManifest.load(tmp_path / "ws")
        assert manifest.is_complete("synth") and manifest.is_complete("cluster")
        assert not manifest.is_complete("pretrain")


class TestRunAllFlow:
    """A full run followed by an idempotent rerun and a report."""

    @pytest.mark.integration
    def test_run_all_then_report(self, runner, config_file, tmp_path):
        first = runner.invoke(cli, _args("run-all", config_file))
        assert first.exit_code == 0, first.output
        assert "ran: synth, cluster, split, pretrain, embed, evaluate" in first.output

        second = runner.invoke(cli, _args("run-all", config_file))
        assert second.exit_code == 0
        assert "up to date" in second.output

        report = runner.invoke(cli, _args("report", config_file))
        assert report.exit_code == 0
        assert "ViT + PCA + GBT" in report.output
        assert "Brain Volumetrics (AE + GBT)" in report.output

    @pytest.mark.integration
    def test_workspace_flag_overrides_config(self, runner, config_file, tmp_path):
        other = tmp_path / "elsewhere"
        result = runner.invoke(cli, _args("synth", config_file, "--workspace", str(other)))
        assert result.exit_code == 0
        assert (other / "synth" / "truth.csv").exists()
        assert not (tmp_path / "ws").exists()

    @pytest.mark.integration
    def test_report_before_evaluate(self, runner, config_file):
        result = runner.invoke(cli, _args("report", config_file))
        assert result.exit_code == 3
