"""Synthetic longitudinal cohorts with planted progression archetypes.

Stands in for restricted cohort data: CDR-SB trajectories, tabular marker
groups and toy head phantoms, all pure functions of ``(CohortSpec, seed)``.
"""

import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .errors import ArgumentError, ConfigError
from .volio import Volume

logger = logging.getLogger(__name__)

N_GROUPS = 4
GROUP_NAMES = ("stable", "mild", "moderate", "severe")
CDRSB_MAX = 18.0

# (baseline CDR-SB, slope per month) per planted group. Baselines are spaced
# so a series of any visit count stays DTW-nearest its own archetype.
ARCHETYPES = (
    (0.0, 0.0),
    (2.5, 0.05),
    (7.0, 0.12),
    (12.5, 0.25),
)

# Phantom intensities
BACKGROUND = 0.0
SCALP_INTENSITY = 60.0
GREY_INTENSITY = 140.0
WHITE_INTENSITY = 200.0
CAVITY_INTENSITY = 25.0

# Normalized semi-axes of the nested ellipsoids.
SCALP_AXES = (0.92, 0.85, 0.95)
GREY_AXES = (0.80, 0.72, 0.84)
WHITE_AXES = (0.55, 0.48, 0.60)
# Cavity radius per group: wide gap after stable, small steps afterwards.
CAVITY_RADIUS = (0.12, 0.30, 0.34, 0.38)

# Stream ids for seed derivation.
_TRAJECTORY_STREAM = 0
_TABULAR_STREAM = 1
_VOLUME_STREAM = 2


class CohortSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    n_subjects: int = Field(400, ge=1)
    group_proportions: Tuple[float, float, float, float] = (0.10, 0.33, 0.29, 0.28)
    visit_count_range: Tuple[int, int] = (3, 10)
    visit_spacing_months: float = Field(6.0, gt=0)
    visit_jitter_months: float = Field(1.0, ge=0)
    score_noise: float = Field(0.3, ge=0)
    tabular_signal: float = Field(1.0, ge=0)
    tabular_noise: float = Field(1.0, gt=0)
    missing_rate: float = Field(0.05, ge=0, lt=1)
    volume_dims: Tuple[int, int, int] = (32, 32, 32)
    volume_noise: float = Field(4.0, ge=0)
    shape_jitter: float = Field(0.03, ge=0, lt=0.2)
    seed: int = 0

    @model_validator(mode="after")
    def _check(self):
        props = self.group_proportions
        if min(props) < 0 or abs(sum(props) - 1.0) > 1e-9:
            raise ValueError(f"group_proportions must be nonnegative and sum to 1, got {props}")
        lo, hi = self.visit_count_range
        if lo < 2 or hi < lo:
            raise ValueError(f"visit_count_range must satisfy 2 <= lo <= hi, got {(lo, hi)}")
        if self.visit_jitter_months >= self.visit_spacing_months / 2:
            raise ValueError("visit_jitter_months must be below half the visit spacing")
        if min(self.volume_dims) < 16:
            raise ValueError(f"volume_dims must be >= 16 per axis, got {self.volume_dims}")
        return self


@dataclass
class Trajectory:
    subject_id: str
    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.times.shape != self.values.shape or self.times.ndim != 1:
            raise ArgumentError(f"{self.subject_id}: times and values must be equal-length 1-D")
        if len(self.times) < 2:
            raise ArgumentError(f"{self.subject_id}: at least two visits are required")
        if np.any(np.diff(self.times) <= 0):
            raise ArgumentError(f"{self.subject_id}: visit times must be strictly increasing")
        if np.any(self.values < 0) or np.any(self.values > CDRSB_MAX):
            raise ArgumentError(f"{self.subject_id}: CDR-SB values must lie in [0, 18]")

    def __len__(self):
        return len(self.values)


@dataclass(frozen=True)
class FeatureDef:
    name: str
    loc: float
    scale: float
    # +1: rises with impairment, -1: falls with impairment
    direction: int = 1
    kind: str = "continuous"


@dataclass(frozen=True)
class FeatureGroup:
    name: str
    label: str
    features: Tuple[FeatureDef, ...]
    # mean shift per planted group, in within-group standard deviations
    profile: Tuple[float, float, float, float]

    @property
    def names(self) -> List[str]:
        return [f.name for f in self.features]


FEATURE_GROUPS: Tuple[FeatureGroup, ...] = (
    FeatureGroup(
        "cognitive_scores",
        "Cognitive Scores",
        (
            FeatureDef("ADAS13", 10.0, 5.0, 1),
            FeatureDef("MMSE", 28.0, 2.0, -1),
            FeatureDef("RAVLT_immediate", 40.0, 10.0, -1),
            FeatureDef("LDELTOTAL", 9.0, 4.0, -1),
            FeatureDef("DIGITSCOR", 40.0, 10.0, -1),
            FeatureDef("TRABSCOR", 90.0, 40.0, 1),
            FeatureDef("FAQ", 2.0, 3.0, 1),
            FeatureDef("MOCA", 25.0, 3.0, -1),
        ),
        (1.3, 0.0, 1.2, 3.0),
    ),
    FeatureGroup(
        "csf_markers",
        "CSF Markers",
        (
            FeatureDef("ABETA", 1000.0, 300.0, -1),
            FeatureDef("TAU", 250.0, 80.0, 1),
            FeatureDef("PTAU", 23.0, 8.0, 1),
        ),
        (0.9, 0.0, 0.8, 1.3),
    ),
    FeatureGroup(
        "pet_measures",
        "PET Measures",
        (
            FeatureDef("FDG", 6.3, 0.6, -1),
            FeatureDef("AV45", 1.1, 0.2, 1),
            FeatureDef("PIB", 1.5, 0.4, 1),
            FeatureDef("FBB", 1.1, 0.2, 1),
        ),
        (1.0, 0.0, 0.9, 1.8),
    ),
    FeatureGroup(
        "risk_factors",
        "Risk Factors",
        (
            FeatureDef("AGE", 73.0, 7.0, 1),
            FeatureDef("PTGENDER", 0.45, 0.0, 1, kind="binary"),
            FeatureDef("PTEDUCAT", 16.0, 2.5, -1, kind="integer"),
            FeatureDef("APOE4", 0.35, 0.0, 1, kind="allele_count"),
        ),
        (0.3, 0.0, 0.2, 0.3),
    ),
    FeatureGroup(
        "brain_volumetrics",
        "Brain Volumetrics",
        (
            FeatureDef("Hippocampus", 7000.0, 1000.0, -1),
            FeatureDef("Entorhinal", 3600.0, 600.0, -1),
            FeatureDef("MidTemp", 20000.0, 2500.0, -1),
            FeatureDef("Fusiform", 17500.0, 2200.0, -1),
            FeatureDef("Ventricles", 40000.0, 15000.0, 1),
        ),
        (1.2, 0.0, 1.0, 2.4),
    ),
)
FEATURE_GROUP_INDEX = {g.name: g for g in FEATURE_GROUPS}

# Demographics are always recorded; missingness never touches them.
ALWAYS_OBSERVED = ("AGE", "PTGENDER")
# Carrier probability per planted group and the share of carriers with two alleles.
APOE4_CARRIER = (0.55, 0.30, 0.50, 0.60)
APOE4_HOMOZYGOUS = 0.2


@dataclass
class TabularRecord:
    """One subject's marker groups; NaN is the explicit missing marker."""

    subject_id: str
    groups: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        for name, values in self.groups.items():
            group = FEATURE_GROUP_INDEX.get(name)
            if group is None:
                raise ArgumentError(f"unknown feature group '{name}'")
            values = np.asarray(values, dtype=np.float64)
            if values.shape != (len(group.features),):
                raise ArgumentError(
                    f"{self.subject_id}: group '{name}' needs {len(group.features)} values"
                )
            if np.any(np.isinf(values)):
                raise ArgumentError(f"{self.subject_id}: group '{name}' holds infinite values")
            self.groups[name] = values

    def feature(self, name: str) -> float:
        for group in FEATURE_GROUPS:
            if name in group.names and group.name in self.groups:
                return float(self.groups[group.name][group.names.index(name)])
        raise KeyError(name)

    @property
    def age(self) -> float:
        return self.feature("AGE")

    @property
    def sex(self) -> int:
        return int(self.feature("PTGENDER"))


@dataclass(frozen=True)
class StrataSubject:
    subject_id: str
    age: float
    sex: int
    group: int


@dataclass(frozen=True)
class SplitSpec:
    train_ids: Tuple[str, ...]
    test_ids: Tuple[str, ...]
    strata_key: str = "age_quartile x sex x group"

    def __post_init__(self):
        if set(self.train_ids) & set(self.test_ids):
            raise ArgumentError("train and test ids overlap")

    def partition_of(self, subject_id: str) -> str:
        return "test" if subject_id in set(self.test_ids) else "train"

    def to_frame(self) -> pd.DataFrame:
        rows = [(s, "train") for s in self.train_ids] + [(s, "test") for s in self.test_ids]
        return pd.DataFrame(rows, columns=["subject_id", "partition"]).sort_values(
            "subject_id", kind="stable", ignore_index=True
        )

    @classmethod
    def from_frame(cls, frame: pd.DataFrame, strata_key: str = "age_quartile x sex x group"):
        train = tuple(frame.loc[frame["partition"] == "train", "subject_id"].astype(str))
        test = tuple(frame.loc[frame["partition"] == "test", "subject_id"].astype(str))
        return cls(train_ids=train, test_ids=test, strata_key=strata_key)


def _rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *stream]))


def subject_ids(n: int) -> List[str]:
    return [f"SUBJ{i:04d}" for i in range(n)]


def assign_groups(spec: CohortSpec) -> "OrderedDict[str, int]":
    """Planted group per subject: largest-remainder counts, then a seeded shuffle."""
    if spec.n_subjects < N_GROUPS:
        raise ConfigError(f"n_subjects={spec.n_subjects} is below the {N_GROUPS} planted groups")
    raw = np.asarray(spec.group_proportions) * spec.n_subjects
    counts = np.floor(raw).astype(int)
    remainder = spec.n_subjects - counts.sum()
    for idx in np.argsort(-(raw - counts), kind="stable")[:remainder]:
        counts[idx] += 1
    labels = np.repeat(np.arange(N_GROUPS), counts)
    _rng(spec.seed, _TRAJECTORY_STREAM, 0).shuffle(labels)
    return OrderedDict(zip(subject_ids(spec.n_subjects), (int(g) for g in labels)))


def quantize_cdrsb(values: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(values) * 2.0) / 2.0, 0.0, CDRSB_MAX)


def gen_trajectories(spec: CohortSpec) -> List[Tuple[Trajectory, int]]:
    groups = assign_groups(spec)
    rng = _rng(spec.seed, _TRAJECTORY_STREAM, 1)
    lo, hi = spec.visit_count_range
    out = []
    for sid, group in groups.items():
        n_visits = int(rng.integers(lo, hi + 1))
        jitter = rng.uniform(-spec.visit_jitter_months, spec.visit_jitter_months, n_visits)
        jitter[0] = 0.0
        times = np.arange(n_visits) * spec.visit_spacing_months + jitter
        baseline, slope = ARCHETYPES[group]
        baseline = baseline + spec.score_noise * rng.standard_normal()
        values = baseline + slope * times + spec.score_noise * rng.standard_normal(n_visits)
        out.append((Trajectory(sid, times, quantize_cdrsb(values)), group))
    logger.debug("generated %d trajectories (seed=%d)", len(out), spec.seed)
    return out


def expected_feature_means(spec: CohortSpec) -> Dict[str, np.ndarray]:
    """Population means per feature group, shape (N_GROUPS, n_features)."""
    means = {}
    for group in FEATURE_GROUPS:
        table = np.zeros((N_GROUPS, len(group.features)))
        for g in range(N_GROUPS):
            shift = spec.tabular_signal * group.profile[g]
            for j, feat in enumerate(group.features):
                if feat.kind == "binary":
                    table[g, j] = feat.loc
                elif feat.kind == "allele_count":
                    table[g, j] = _apoe4_carrier_rate(spec, g) * (1.0 + APOE4_HOMOZYGOUS)
                else:
                    table[g, j] = feat.loc + feat.direction * feat.scale * shift
        means[group.name] = table
    return means


def _apoe4_carrier_rate(spec: CohortSpec, group: int) -> float:
    base = float(np.mean(APOE4_CARRIER))
    return base + spec.tabular_signal * (APOE4_CARRIER[group] - base)


def gen_tabular(groups: Mapping[str, int], spec: CohortSpec) -> List[TabularRecord]:
    rng = _rng(spec.seed, _TABULAR_STREAM)
    records = []
    for sid, g in groups.items():
        values = {}
        for group in FEATURE_GROUPS:
            row = np.empty(len(group.features))
            shift = spec.tabular_signal * group.profile[g]
            for j, feat in enumerate(group.features):
                if feat.kind == "binary":
                    row[j] = float(rng.random() < feat.loc)
                elif feat.kind == "allele_count":
                    carrier = rng.random() < _apoe4_carrier_rate(spec, g)
                    row[j] = float(carrier) * (2.0 if rng.random() < APOE4_HOMOZYGOUS else 1.0)
                else:
                    z = shift + spec.tabular_noise * rng.standard_normal()
                    row[j] = feat.loc + feat.direction * feat.scale * z
                    if feat.kind == "integer":
                        row[j] = float(np.round(row[j]))
            missing = rng.random(len(row)) < spec.missing_rate
            for j, feat in enumerate(group.features):
                if missing[j] and feat.name not in ALWAYS_OBSERVED:
                    row[j] = np.nan
            values[group.name] = row
        records.append(TabularRecord(sid, values))
    return records


def _ellipsoid(coords: Tuple[np.ndarray, ...], axes: Sequence[float]) -> np.ndarray:
    return sum((c / a) ** 2 for c, a in zip(coords, axes)) <= 1.0


def _grid(dims: Sequence[int]) -> Tuple[np.ndarray, ...]:
    axes = [(np.arange(d) - (d - 1) / 2.0) / (d / 2.0) for d in dims]
    return tuple(np.meshgrid(*axes, indexing="ij"))


def cavity_mask(dims: Sequence[int], group: int, scale: float = 1.0) -> np.ndarray:
    """Analytic central-cavity mask of a zero-jitter phantom."""
    radius = CAVITY_RADIUS[group] * scale
    return _ellipsoid(_grid(dims), (radius, radius, radius))


def phantom(dims: Sequence[int], group: int, axis_scale=(1.0, 1.0, 1.0), cavity_scale=1.0):
    coords = _grid(dims)
    out = np.full(tuple(dims), BACKGROUND)
    layers = (
        (SCALP_AXES, SCALP_INTENSITY),
        (GREY_AXES, GREY_INTENSITY),
        (WHITE_AXES, WHITE_INTENSITY),
    )
    for axes, intensity in layers:
        out[_ellipsoid(coords, [a * s for a, s in zip(axes, axis_scale)])] = intensity
    out[cavity_mask(dims, group, cavity_scale)] = CAVITY_INTENSITY
    return out


def gen_volumes(groups: Mapping[str, int], spec: CohortSpec) -> List[Volume]:
    volumes = []
    for index, g in enumerate(groups.values()):
        rng = _rng(spec.seed, _VOLUME_STREAM, index)
        axis_scale = 1.0 + spec.shape_jitter * rng.standard_normal(3)
        cavity_scale = 1.0 + spec.shape_jitter * rng.standard_normal()
        data = phantom(spec.volume_dims, g, axis_scale, cavity_scale)
        data = data + spec.volume_noise * rng.standard_normal(data.shape)
        volumes.append(Volume.from_array(np.clip(data, 0.0, 255.0)))
    return volumes


def strata_subjects(records: Sequence[TabularRecord], groups: Mapping[str, int]):
    return [StrataSubject(r.subject_id, r.age, r.sex, int(groups[r.subject_id])) for r in records]


def stratified_split(subjects: Sequence[StrataSubject], ratio: float, seed: int) -> SplitSpec:
    """Per-stratum test allocation of round-half-up(ratio * |stratum|)."""
    if not subjects:
        raise ConfigError("stratified_split needs at least one subject")
    if not 0.0 < ratio < 1.0:
        raise ConfigError(f"split ratio must lie in (0, 1), got {ratio}")
    ages = np.array([s.age for s in subjects], dtype=np.float64)
    if np.any(np.isnan(ages)):
        raise ConfigError("every subject needs an age for stratification")
    edges = np.quantile(ages, [0.25, 0.5, 0.75])
    strata: Dict[Tuple[int, int, int], List[str]] = {}
    for s, age in zip(subjects, ages):
        key = (int(np.digitize(age, edges)), int(s.sex), int(s.group))
        strata.setdefault(key, []).append(s.subject_id)

    rng = np.random.default_rng(seed)
    train, test = [], []
    for key in sorted(strata):
        members = sorted(strata[key])
        n_test = int(math.floor(ratio * len(members) + 0.5))
        order = rng.permutation(len(members))
        chosen = {members[i] for i in order[:n_test]}
        test.extend(m for m in members if m in chosen)
        train.extend(m for m in members if m not in chosen)
    logger.info("split %d subjects into %d train / %d test over %d strata",
                len(subjects), len(train), len(test), len(strata))
    return SplitSpec(tuple(sorted(train)), tuple(sorted(test)))


def feature_matrix(records: Sequence[TabularRecord], group: str) -> np.ndarray:
    if group not in FEATURE_GROUP_INDEX:
        raise ArgumentError(f"unknown feature group '{group}'")
    return np.vstack([r.groups[group] for r in records])


def write_trajectories_csv(trajectories: Sequence[Trajectory], path) -> None:
    rows = [
        (t.subject_id, float(m), float(v))
        for t in trajectories
        for m, v in zip(t.times, t.values)
    ]
    pd.DataFrame(rows, columns=["subject_id", "visit_month", "cdrsb"]).to_csv(path, index=False)


def read_trajectories_csv(path) -> List[Trajectory]:
    frame = pd.read_csv(path, dtype={"subject_id": str})
    return [
        Trajectory(str(sid), part["visit_month"].to_numpy(), part["cdrsb"].to_numpy())
        for sid, part in frame.groupby("subject_id", sort=False)
    ]


def write_tabular_csv(records: Sequence[TabularRecord], path) -> None:
    columns = ["subject_id"] + [name for g in FEATURE_GROUPS for name in g.names]
    rows = [[r.subject_id] + [v for g in FEATURE_GROUPS for v in r.groups[g.name]] for r in records]
    pd.DataFrame(rows, columns=columns).to_csv(path, index=False, na_rep="")


def read_tabular_csv(path) -> List[TabularRecord]:
    frame = pd.read_csv(path, dtype={"subject_id": str})
    records = []
    for _, row in frame.iterrows():
        groups = {g.name: row[g.names].to_numpy(dtype=np.float64) for g in FEATURE_GROUPS}
        records.append(TabularRecord(str(row["subject_id"]), groups))
    return records


def write_truth_csv(groups: Mapping[str, int], path) -> None:
    pd.DataFrame(list(groups.items()), columns=["subject_id", "group"]).to_csv(path, index=False)


def read_truth_csv(path) -> "OrderedDict[str, int]":
    frame = pd.read_csv(path, dtype={"subject_id": str})
    return OrderedDict((str(s), int(g)) for s, g in zip(frame["subject_id"], frame["group"]))


def group_counts(groups: Mapping[str, int], n_groups: int = N_GROUPS) -> List[int]:
    counts = [0] * n_groups
    for g in groups.values():
        counts[g] += 1
    return counts


def describe(spec: CohortSpec, groups: Optional[Mapping[str, int]] = None) -> str:
    groups = groups if groups is not None else assign_groups(spec)
    parts = ", ".join(f"{n}={c}" for n, c in zip(GROUP_NAMES, group_counts(groups)))
    return f"cohort n={spec.n_subjects} seed={spec.seed} ({parts})"
