"""Pipeline configuration: typed sections, JSON loading, hashing and seed rewriting."""

import hashlib
import json
import logging
from pathlib import Path
from typing import Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .augment import AugmentConfig
from .errors import ConfigError
from .gbt import GbtParams
from .models import CnnConfig, ViTConfig
from .nncore import TrainConfig
from .synthcohort import FEATURE_GROUP_INDEX, CohortSpec
from .trajectory import DtwConfig

logger = logging.getLogger(__name__)

# offsets applied to the master seed by --seed
SEED_OFFSETS = {
    "cohort": 0,
    "augmentation": 1,
    "clustering": 2,
    "pretraining": 3,
    "evaluation": 4,
}


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ClusteringConfig(_Section):
    k: int = Field(4, ge=1)
    k_max: int = Field(8, ge=1)
    restarts: int = Field(10, ge=1)
    max_iter: int = Field(50, ge=1)
    dba_iterations: int = Field(10, ge=1)
    dtw: DtwConfig = DtwConfig()
    seed: int = 2


class PretrainingConfig(_Section):
    vit: ViTConfig = ViTConfig()
    train: TrainConfig = TrainConfig(epochs=200, learning_rate=1e-4, batch_size=4, seed=3)
    copies_per_volume: int = Field(1, ge=0)
    # augmented inputs reconstruct their clean original instead of themselves
    clean_targets: bool = True
    monitor_size: int = Field(4, ge=1)


class ReductionConfig(_Section):
    variance_target: float = Field(0.95, gt=0, le=1)
    max_components: Optional[int] = Field(15, ge=1)


class ClassifiersConfig(_Section):
    gbt: GbtParams = GbtParams()
    fc_head: TrainConfig = TrainConfig(epochs=200, learning_rate=1e-4, batch_size=16, dropout_rate=0.3)
    fc_hidden: Tuple[int, ...] = (128, 32)
    cnn: CnnConfig = CnnConfig()
    cnn_train: TrainConfig = TrainConfig(epochs=30, learning_rate=1e-4, batch_size=8)
    cnn_variants: Tuple[str, ...] = ("two_rate", "single_rate")
    tabular_ae: TrainConfig = TrainConfig(epochs=200, learning_rate=1e-2, batch_size=32)
    feature_groups: Tuple[str, ...] = tuple(FEATURE_GROUP_INDEX)

    @model_validator(mode="after")
    def _check(self):
        unknown = [g for g in self.feature_groups if g not in FEATURE_GROUP_INDEX]
        if unknown:
            raise ValueError(f"unknown feature groups: {unknown}")
        bad = [v for v in self.cnn_variants if v not in ("two_rate", "single_rate")]
        if bad:
            raise ValueError(f"unknown CNN variants: {bad}")
        return self


class EvaluationConfig(_Section):
    repetitions: int = Field(5, ge=1)
    test_ratio: float = Field(0.2, gt=0, lt=1)
    # draw a fresh split per repetition instead of holding it fixed
    resplit: bool = False
    seed: int = 4


class PathsConfig(_Section):
    workspace: Path = Path("workspace")


class PipelineConfig(_Section):
    cohort: CohortSpec = CohortSpec()
    augmentation: AugmentConfig = AugmentConfig(seed=1)
    clustering: ClusteringConfig = ClusteringConfig()
    pretraining: PretrainingConfig = PretrainingConfig()
    reduction: ReductionConfig = ReductionConfig()
    classifiers: ClassifiersConfig = ClassifiersConfig()
    evaluation: EvaluationConfig = EvaluationConfig()
    paths: PathsConfig = PathsConfig()

    @model_validator(mode="after")
    def _check(self):
        if tuple(self.pretraining.vit.vol_dims) != tuple(self.cohort.volume_dims):
            raise ValueError(
                f"pretraining.vit.vol_dims {self.pretraining.vit.vol_dims} must equal "
                f"cohort.volume_dims {self.cohort.volume_dims}"
            )
        if self.clustering.k > self.cohort.n_subjects:
            raise ValueError("clustering.k exceeds cohort.n_subjects")
        return self


def parse_config(doc: dict) -> PipelineConfig:
    try:
        return PipelineConfig.model_validate(doc)
    except ValidationError as exc:
        raise ConfigError(f"invalid configuration:\n{exc}") from exc


def load_config(path) -> PipelineConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    cfg = parse_config(doc)
    logger.debug("loaded config %s (hash %s)", path, config_hash(cfg)[:12])
    return cfg


def canonical_json(cfg: PipelineConfig) -> str:
    # the workspace location is not part of a run's identity
    return json.dumps(cfg.model_dump(mode="json", exclude={"paths"}), sort_keys=True, separators=(",", ":"))


def config_hash(cfg: PipelineConfig) -> str:
    return hashlib.sha256(canonical_json(cfg).encode("utf-8")).hexdigest()


def with_seed(cfg: PipelineConfig, seed: int) -> PipelineConfig:
    """Rewrite every section seed from one master seed."""
    pre = cfg.pretraining
    return cfg.model_copy(
        update={
            "cohort": cfg.cohort.model_copy(update={"seed": seed + SEED_OFFSETS["cohort"]}),
            "augmentation": cfg.augmentation.model_copy(update={"seed": seed + SEED_OFFSETS["augmentation"]}),
            "clustering": cfg.clustering.model_copy(update={"seed": seed + SEED_OFFSETS["clustering"]}),
            "pretraining": pre.model_copy(
                update={"train": pre.train.model_copy(update={"seed": seed + SEED_OFFSETS["pretraining"]})}
            ),
            "evaluation": cfg.evaluation.model_copy(update={"seed": seed + SEED_OFFSETS["evaluation"]}),
        }
    )


def apply_overrides(
    cfg: PipelineConfig,
    seed: Optional[int] = None,
    workspace: Optional[Path] = None,
    k: Optional[int] = None,
) -> PipelineConfig:
    """Command-line flags take precedence over the file."""
    if seed is not None:
        cfg = with_seed(cfg, seed)
    if workspace is not None:
        cfg = cfg.model_copy(update={"paths": PathsConfig(workspace=Path(workspace))})
    if k is not None:
        if k < 1:
            raise ConfigError(f"--k must be positive, got {k}")
        cfg = cfg.model_copy(update={"clustering": cfg.clustering.model_copy(update={"k": k})})
    return cfg
