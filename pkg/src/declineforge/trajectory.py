"""Trajectory clustering with dynamic time warping.

DTW distance, DTW barycenter averaging (DBA), k-means with k-means++ seeding
under DTW, elbow curves and ordered progression labels.
"""

import enum
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Literal, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field

from .errors import ArgumentError, ConfigError, InfeasibleBandError
from .synthcohort import TabularRecord, Trajectory

logger = logging.getLogger(__name__)

CONVERGENCE_TOL = 1e-9
# pairs per batched DP; bounds peak memory of the cost tables
PAIR_CHUNK = 8192


class ProgressionLabel(enum.IntEnum):
    STABLE = 0
    MILD = 1
    MODERATE = 2
    SEVERE = 3

    @property
    def title(self) -> str:
        return self.name.capitalize()


PROGRESSION_TITLES = tuple(label.title for label in ProgressionLabel)


class DtwConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    cost: Literal["squared", "absolute"] = "squared"
    band_radius: Optional[int] = Field(None, ge=0)


DEFAULT_DTW = DtwConfig()


@dataclass
class ClusterModel:
    k: int
    barycenters: List[np.ndarray]
    assignments: Dict[str, int]
    inertia: float
    label_order: Optional[Tuple[int, ...]] = None
    inertia_trace: List[float] = field(default_factory=list)

    def members(self, cluster: int) -> List[str]:
        return [s for s, c in self.assignments.items() if c == cluster]


def _pad(series: Sequence[np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(s) for s in series], dtype=np.int64)
    out = np.zeros((len(series), int(lengths.max())))
    for row, s in zip(out, series):
        row[: len(s)] = s
    return out, lengths


def _accumulated_cost(a, len_a, b, len_b, cfg: DtwConfig) -> np.ndarray:
    """Accumulated-cost tables for a batch of padded pairs, shape (P, La+1, Lb+1)."""
    if np.any(len_a == 0) or np.any(len_b == 0):
        raise ArgumentError("dtw needs nonempty series")
    if cfg.band_radius is not None:
        gap = np.abs(len_a - len_b)
        if np.any(gap > cfg.band_radius):
            raise InfeasibleBandError(
                f"band_radius={cfg.band_radius} is narrower than length difference {int(gap.max())}"
            )
    diff = a[:, :, None] - b[:, None, :]
    local = diff * diff if cfg.cost == "squared" else np.abs(diff)
    n_pairs, la, lb = local.shape
    if cfg.band_radius is not None:
        i = np.arange(1, la + 1)[:, None]
        j = np.arange(1, lb + 1)[None, :]
        local = np.where(np.abs(i - j) > cfg.band_radius, np.inf, local)
    acc = np.full((n_pairs, la + 1, lb + 1), np.inf)
    acc[:, 0, 0] = 0.0
    for i in range(1, la + 1):
        for j in range(1, lb + 1):
            best = np.minimum(np.minimum(acc[:, i - 1, j], acc[:, i, j - 1]), acc[:, i - 1, j - 1])
            acc[:, i, j] = local[:, i - 1, j - 1] + best
    return acc


def _pair_distances(left: Sequence[np.ndarray], right: Sequence[np.ndarray], cfg: DtwConfig) -> np.ndarray:
    out = np.empty(len(left))
    for start in range(0, len(left), PAIR_CHUNK):
        stop = min(start + PAIR_CHUNK, len(left))
        a, len_a = _pad(left[start:stop])
        b, len_b = _pad(right[start:stop])
        acc = _accumulated_cost(a, len_a, b, len_b, cfg)
        out[start:stop] = acc[np.arange(stop - start), len_a, len_b]
    return out


def _as_series(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64).ravel()
    if arr.size == 0:
        raise ArgumentError("dtw needs nonempty series")
    return arr


def dtw_distance(a, b, cfg: DtwConfig = DEFAULT_DTW) -> float:
    return float(_pair_distances([_as_series(a)], [_as_series(b)], cfg)[0])


def _backtrack(acc: np.ndarray, n: int, m: int) -> List[Tuple[int, int]]:
    """Optimal warping path as 0-based index pairs; ties prefer diagonal, vertical, horizontal."""
    i, j = n, m
    path = [(i - 1, j - 1)]
    while (i, j) != (1, 1):
        moves = ((i - 1, j - 1), (i - 1, j), (i, j - 1))
        i, j = min(moves, key=lambda ij: acc[ij])
        path.append((i - 1, j - 1))
    path.reverse()
    return path


def dtw_path(a, b, cfg: DtwConfig = DEFAULT_DTW) -> Tuple[float, List[Tuple[int, int]]]:
    a, b = _as_series(a), _as_series(b)
    acc = _accumulated_cost(a[None, :], np.array([len(a)]), b[None, :], np.array([len(b)]), cfg)[0]
    return float(acc[len(a), len(b)]), _backtrack(acc, len(a), len(b))


def distance_matrix(series: Sequence[np.ndarray], centres: Sequence[np.ndarray], cfg: DtwConfig = DEFAULT_DTW) -> np.ndarray:
    n, k = len(series), len(centres)
    left = [series[i] for i in range(n) for _ in range(k)]
    right = [centres[c] for _ in range(n) for c in range(k)]
    return _pair_distances(left, right, cfg).reshape(n, k)


def _medoid(members: Sequence[np.ndarray], cfg: DtwConfig) -> int:
    if len(members) == 1:
        return 0
    return int(np.argmin(distance_matrix(members, members, cfg).sum(axis=1)))


def _resample(series: np.ndarray, length: int) -> np.ndarray:
    if len(series) == length:
        return series.astype(np.float64).copy()
    if len(series) == 1:
        return np.full(length, float(series[0]))
    old = np.linspace(0.0, 1.0, len(series))
    new = np.linspace(0.0, 1.0, length)
    return np.interp(new, old, series)


def dba_barycenter(
    members: Sequence,
    length: int,
    iterations: int,
    cfg: DtwConfig = DEFAULT_DTW,
) -> np.ndarray:
    members = [_as_series(m) for m in members]
    if not members:
        raise ArgumentError("dba_barycenter needs at least one member")
    if length < 1:
        raise ArgumentError(f"barycenter length must be >= 1, got {length}")
    barycenter = _resample(members[_medoid(members, cfg)], length)
    a, len_a = _pad(members)
    for _ in range(iterations):
        b = np.broadcast_to(barycenter, (len(members), length))
        acc = _accumulated_cost(a, len_a, b, np.full(len(members), length), cfg)
        sums = np.zeros(length)
        counts = np.zeros(length)
        for p, member in enumerate(members):
            for i, j in _backtrack(acc[p], len(member), length):
                sums[j] += member[i]
                counts[j] += 1
        updated = sums / counts
        delta = float(np.max(np.abs(updated - barycenter)))
        barycenter = updated
        if delta <= CONVERGENCE_TOL:
            break
    return barycenter


def _values(trajectories: Sequence[Trajectory]) -> List[np.ndarray]:
    return [np.asarray(t.values, dtype=np.float64) for t in trajectories]


def _kmeans_pp(series, k: int, rng: np.random.Generator, cfg: DtwConfig) -> List[int]:
    n = len(series)
    chosen = [int(rng.integers(n))]
    nearest = distance_matrix(series, [series[chosen[0]]], cfg)[:, 0]
    while len(chosen) < k:
        weights = nearest ** 2
        total = weights.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=weights / total))
        else:
            pool = [i for i in range(n) if i not in chosen]
            nxt = int(pool[rng.integers(len(pool))])
        chosen.append(nxt)
        nearest = np.minimum(nearest, distance_matrix(series, [series[nxt]], cfg)[:, 0])
    return chosen


def _repair_empty(assign: np.ndarray, dist: np.ndarray, barycenters: List[np.ndarray], series, cfg: DtwConfig) -> None:
    """Reseed empty clusters with the point farthest from its barycenter (in place)."""
    k = dist.shape[1]
    for c in range(k):
        if np.any(assign == c):
            continue
        counts = np.bincount(assign, minlength=k)
        own = dist[np.arange(len(assign)), assign]
        movable = counts[assign] > 1
        if not np.any(movable):
            continue
        far = int(np.argmax(np.where(movable, own, -np.inf)))
        assign[far] = c
        barycenters[c] = np.asarray(series[far], dtype=np.float64).copy()
        dist[:, c] = distance_matrix(series, [barycenters[c]], cfg)[:, 0]


def _median_length(members: Sequence[np.ndarray]) -> int:
    return int(np.floor(np.median([len(m) for m in members]) + 0.5))


def _lloyd(series, k, start, max_iter, dba_iterations, cfg):
    barycenters = [np.asarray(b, dtype=np.float64).copy() for b in start]
    assign = None
    trace: List[float] = []
    n = len(series)
    converged = False
    for _ in range(max_iter):
        dist = distance_matrix(series, barycenters, cfg)
        new = np.argmin(dist, axis=1)
        _repair_empty(new, dist, barycenters, series, cfg)
        trace.append(float(dist[np.arange(n), new].sum()))
        if assign is not None and np.array_equal(new, assign):
            converged = True
            break
        assign = new
        for c in range(k):
            members = [series[i] for i in np.flatnonzero(assign == c)]
            if not members:
                continue
            candidate = dba_barycenter(members, _median_length(members), dba_iterations, cfg)
            old_cost = dist[assign == c, c].sum()
            new_cost = _pair_distances(members, [candidate] * len(members), cfg).sum()
            # keep whichever centre serves the cluster better so inertia never rises
            if new_cost <= old_cost:
                barycenters[c] = candidate
    final = distance_matrix(series, barycenters, cfg)[np.arange(n), assign].sum()
    if not converged:
        trace.append(float(final))
    return barycenters, assign, float(final), trace


def kmeans_dtw(
    trajectories: Sequence[Trajectory],
    k: int,
    restarts: int = 10,
    max_iter: int = 50,
    seed: int = 0,
    cfg: DtwConfig = DEFAULT_DTW,
    dba_iterations: int = 10,
    init: Optional[Sequence[np.ndarray]] = None,
) -> ClusterModel:
    """Best of ``restarts`` k-means++ runs; ``init`` adds one run started from those barycenters."""
    if k < 1:
        raise ArgumentError(f"k must be positive, got {k}")
    if len(trajectories) < k:
        raise ArgumentError(f"kmeans_dtw needs at least k={k} trajectories, got {len(trajectories)}")
    if init is not None and len(init) != k:
        raise ArgumentError(f"init holds {len(init)} barycenters, k={k}")
    series = _values(trajectories)
    best = None
    if init is not None:
        best = _lloyd(series, k, [_as_series(b) for b in init], max_iter, dba_iterations, cfg)
    for child in np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF).spawn(max(1, restarts)):
        rng = np.random.default_rng(child)
        seeds = _kmeans_pp(series, k, rng, cfg)
        result = _lloyd(series, k, [series[i] for i in seeds], max_iter, dba_iterations, cfg)
        if best is None or result[2] < best[2]:
            best = result
    barycenters, assign, inertia, trace = best
    model = ClusterModel(
        k=k,
        barycenters=barycenters,
        assignments={t.subject_id: int(c) for t, c in zip(trajectories, assign)},
        inertia=inertia,
        inertia_trace=trace,
    )
    if k == len(ProgressionLabel):
        model.label_order = _label_order(barycenters)
    logger.info("kmeans_dtw k=%d restarts=%d inertia=%.6g", k, restarts, inertia)
    return model


def elbow_curve(
    trajectories: Sequence[Trajectory],
    k_max: int,
    restarts: int = 10,
    seed: int = 0,
    max_iter: int = 50,
    cfg: DtwConfig = DEFAULT_DTW,
    dba_iterations: int = 10,
) -> List[Tuple[int, float]]:
    """Best inertia per k in 1..k_max; never increases with k.

    Besides the seeded restarts, each k > 1 also starts from the previous
    barycenters plus the series farthest from its own, which can only lower
    the k - 1 inertia.
    """
    if k_max < 1:
        raise ArgumentError(f"k_max must be >= 1, got {k_max}")
    series = _values(trajectories)
    curve = []
    previous: Optional[ClusterModel] = None
    for k in range(1, k_max + 1):
        init = None
        if previous is not None and k <= len(series):
            own = distance_matrix(series, previous.barycenters, cfg).min(axis=1)
            init = [*previous.barycenters, series[int(np.argmax(own))]]
        model = kmeans_dtw(
            trajectories, k, restarts=restarts, max_iter=max_iter, seed=seed, cfg=cfg,
            dba_iterations=dba_iterations, init=init,
        )
        curve.append((k, model.inertia))
        previous = model
    return curve


def _label_order(barycenters: Sequence[np.ndarray]) -> Tuple[int, ...]:
    """Progression label per cluster index, by ascending (net change, baseline)."""
    ranked = sorted(
        range(len(barycenters)),
        key=lambda c: (float(barycenters[c][-1] - barycenters[c][0]), float(barycenters[c][0])),
    )
    order = [0] * len(barycenters)
    for position, cluster in enumerate(ranked):
        order[cluster] = position
    return tuple(order)


def assign_labels(model: ClusterModel) -> Dict[str, ProgressionLabel]:
    if model.k != len(ProgressionLabel):
        raise ConfigError(f"progression labels need k=4 clusters, got k={model.k}")
    order = _label_order(model.barycenters)
    return {sid: ProgressionLabel(order[c]) for sid, c in model.assignments.items()}


def cluster_summary(
    labels: Mapping[str, ProgressionLabel],
    trajectories: Sequence[Trajectory],
    records: Sequence[TabularRecord],
) -> pd.DataFrame:
    baseline = {t.subject_id: float(t.values[0]) for t in trajectories}
    by_id = {r.subject_id: r for r in records}
    rows = []
    for label in ProgressionLabel:
        ids = [s for s, lab in labels.items() if lab == label]
        recs = [by_id[s] for s in ids if s in by_id]
        apoe = [r.feature("APOE4") for r in recs]
        apoe = [a for a in apoe if not np.isnan(a)]
        rows.append(
            {
                "label": label.title,
                "n_subjects": len(ids),
                "pct_female": 100.0 * np.mean([r.sex for r in recs]) if recs else np.nan,
                "mean_baseline_cdrsb": np.mean([baseline[s] for s in ids]) if ids else np.nan,
                "pct_apoe4": 100.0 * np.mean([a > 0 for a in apoe]) if apoe else np.nan,
            }
        )
    return pd.DataFrame(rows)
