"""Run manifest: stage completion flags, outputs and seeds for one workspace."""

import json
import logging
import os
from pathlib import Path
from typing import Dict, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .errors import DependencyError, ManifestCorruptError, WorkspaceError

logger = logging.getLogger(__name__)

MANIFEST_FILE = "manifest.json"
MANIFEST_VERSION = 1

STAGES = ("synth", "cluster", "split", "pretrain", "embed", "evaluate")
UPSTREAM: Dict[str, tuple] = {
    "synth": (),
    "cluster": ("synth",),
    "split": ("synth",),
    "pretrain": ("synth",),
    "embed": ("pretrain",),
    "evaluate": ("cluster", "split", "embed"),
}


def downstream(stage: str) -> list:
    out = []
    for candidate in STAGES:
        if candidate in out:
            continue
        pending = list(UPSTREAM[candidate])
        while pending:
            up = pending.pop()
            if up == stage or up in out:
                out.append(candidate)
                break
            pending.extend(UPSTREAM[up])
    return out


class StageRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    completed: bool = False
    outputs: Dict[str, str] = Field(default_factory=dict)
    seed: Optional[int] = None


class RunManifest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    version: int = MANIFEST_VERSION
    config_hash: str
    stages: Dict[str, StageRecord] = Field(default_factory=lambda: {s: StageRecord() for s in STAGES})

    @classmethod
    def load(cls, workspace: Path) -> Optional["RunManifest"]:
        path = Path(workspace) / MANIFEST_FILE
        if not path.exists():
            return None
        try:
            manifest = cls.model_validate(json.loads(path.read_text()))
        except (json.JSONDecodeError, UnicodeDecodeError, ValidationError) as exc:
            raise ManifestCorruptError(f"{path} is unreadable: {exc}") from exc
        if manifest.version != MANIFEST_VERSION or set(manifest.stages) != set(STAGES):
            raise ManifestCorruptError(f"{path} has an unexpected layout")
        return manifest

    @classmethod
    def open(cls, workspace: Path, config_hash: str, force: bool = False) -> "RunManifest":
        """Load the workspace manifest, or start one; refuses a different configuration."""
        try:
            manifest = cls.load(workspace)
        except ManifestCorruptError:
            if not force:
                raise
            logger.warning("discarding corrupt manifest in %s (--force)", workspace)
            manifest = None
        if manifest is None:
            return cls(config_hash=config_hash)
        if manifest.config_hash != config_hash:
            if not force:
                raise WorkspaceError(
                    f"workspace {workspace} was produced by a different configuration "
                    f"({manifest.config_hash[:12]} != {config_hash[:12]}); use --force to start over"
                )
            logger.warning("configuration changed; resetting manifest in %s", workspace)
            return cls(config_hash=config_hash)
        return manifest

    def save(self, workspace: Path) -> None:
        path = Path(workspace) / MANIFEST_FILE
        tmp = path.with_suffix(".json.tmp")
        tmp.write_text(self.model_dump_json(indent=2))
        os.replace(tmp, path)

    def is_complete(self, stage: str) -> bool:
        return self.stages[stage].completed

    def require(self, stage: str) -> None:
        for up in UPSTREAM[stage]:
            if not self.is_complete(up):
                raise DependencyError(up, needed_by=stage)

    def begin(self, stage: str, force: bool) -> None:
        """Check dependencies and overwrite rules before a stage writes anything."""
        self.require(stage)
        if self.is_complete(stage) and not force:
            raise WorkspaceError(f"stage '{stage}' already completed; use --force to overwrite")
        for later in [stage] + downstream(stage):
            self.stages[later] = StageRecord()

    def complete(self, stage: str, outputs: Dict[str, str], seed: Optional[int] = None) -> None:
        self.stages[stage] = StageRecord(completed=True, outputs=dict(outputs), seed=seed)

    def all_complete(self) -> bool:
        return all(self.is_complete(s) for s in STAGES)
