"""
Unit tests for the workspace run manifest.
"""

import os
import sys

import pytest

# Add src to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', '..', 'src'))
from declineforge.errors import DependencyError, ManifestCorruptError, WorkspaceError
from declineforge.manifest import MANIFEST_FILE, STAGES, RunManifest, downstream


def _complete(manifest, *stages):
    for stage in stages:
        manifest.begin(stage, force=False)
        manifest.complete(stage, {"out": f"{stage}/out.csv"}, seed=1)


class TestStageGraph:
    """Dependencies between stages."""

    @pytest.mark.unit
    def test_downstream_of_synth(self):
        assert downstream("synth") == ["cluster", "split", "pretrain", "embed", "evaluate"]

    @pytest.mark.unit
    def test_downstream_of_pretrain(self):
        assert downstream("pretrain") == ["embed", "evaluate"]

    @pytest.mark.unit
    def test_evaluate_is_terminal(self):
        assert downstream("evaluate") == []


class TestRunManifest:
    """Completion flags and overwrite rules."""

    @pytest.mark.unit
    def test_fresh_manifest(self, tmp_path):
        manifest = RunManifest.open(tmp_path, "abc")
        assert list(manifest.stages) == list(STAGES)
        assert not any(manifest.is_complete(s) for s in STAGES)

    @pytest.mark.unit
    def test_missing_upstream(self, tmp_path):
        manifest = RunManifest.open(tmp_path, "abc")
        with pytest.raises(DependencyError) as excinfo:
            manifest.begin("cluster", force=False)
        assert excinfo.value.stage == "synth"
        assert excinfo.value.needed_by == "cluster"
        assert excinfo.value.exit_code == 3

    @pytest.mark.unit
    def test_complete_records_outputs(self, tmp_path):
        manifest = RunManifest.open(tmp_path, "abc")
        _complete(manifest, "synth")
        manifest.save(tmp_path)
        back = RunManifest.open(tmp_path, "abc")
        assert back.is_complete("synth")
        assert back.stages["synth"].outputs == {"out": "synth/out.csv"}
        assert back.stages["synth"].seed == 1

    @pytest.mark.unit
    def test_rerun_requires_force(self, tmp_path):
        manifest = RunManifest.open(tmp_path, "abc")
        _complete(manifest, "synth")
        with pytest.raises(WorkspaceError):
            manifest.begin("synth", force=False)

    @pytest.mark.unit
    def test_forced_rerun_invalidates_downstream(self, tmp_path):
        manifest = RunManifest.open(tmp_path, "abc")
        _complete(manifest, "synth", "cluster", "pretrain")
        manifest.begin("synth", force=True)
        assert not manifest.is_complete("synth")
        assert not manifest.is_complete("cluster")
        assert not manifest.is_complete("pretrain")

    @pytest.mark.unit
    def test_sibling_stage_untouched(self, tmp_path):
        manifest = RunManifest.open(tmp_path, "abc")
        _complete(manifest, "synth", "cluster", "split")
        manifest.begin("cluster", force=True)
        assert manifest.is_complete("split")
        assert manifest.is_complete("synth")

    @pytest.mark.unit
    def test_all_complete(self, tmp_path):
        manifest = RunManifest.open(tmp_path, "abc")
        _complete(manifest, *STAGES)
        assert manifest.all_complete()

    @pytest.mark.unit
    def test_different_config_refused(self, tmp_path):
        RunManifest(config_hash="abc").save(tmp_path)
        with pytest.raises(WorkspaceError) as excinfo:
            RunManifest.open(tmp_path, "def")
        assert "--force" in str(excinfo.value)

    @pytest.mark.unit
    def test_different_config_forced_resets(self, tmp_path):
        manifest = RunManifest(config_hash="abc")
        _complete(manifest, "synth")
        manifest.save(tmp_path)
        fresh = RunManifest.open(tmp_path, "def", force=True)
        assert fresh.config_hash == "def"
        assert not fresh.is_complete("synth")

    @pytest.mark.unit
    def test_corrupt_manifest(self, tmp_path):
        (tmp_path / MANIFEST_FILE).write_text("{broken")
        with pytest.raises(ManifestCorruptError):
            RunManifest.open(tmp_path, "abc")

    @pytest.mark.unit
    def test_corrupt_manifest_with_force(self, tmp_path):
        (tmp_path / MANIFEST_FILE).write_text('{"version": 99}')
        manifest = RunManifest.open(tmp_path, "abc", force=True)
        assert manifest.config_hash == "abc"

    @pytest.mark.unit
    def test_save_leaves_no_temp_file(self, tmp_path):
        RunManifest(config_hash="abc").save(tmp_path)
        assert sorted(p.name for p in tmp_path.iterdir()) == [MANIFEST_FILE]
