"""Evaluation metrics: PCA reduction, one-vs-rest AUC, 3D SSIM, run aggregation."""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from scipy.ndimage import uniform_filter
from scipy.stats import rankdata

from .errors import ArgumentError, ShapeError
from .volio import Volume

logger = logging.getLogger(__name__)

CLASS_NAMES = ("Stable", "Mild", "Moderate", "Severe")
SSIM_K1 = 0.01
SSIM_K2 = 0.03
UNDEFINED = "n/a"


@dataclass
class PcaModel:
    mean: np.ndarray
    # all components, descending eigenvalue order; the first n_components are retained
    components: np.ndarray
    explained_variance_ratio: np.ndarray
    n_components: int
    warning: Optional[str] = None

    @property
    def retained(self) -> np.ndarray:
        return self.components[: self.n_components]

    @property
    def cumulative_ratio(self) -> float:
        return float(self.explained_variance_ratio[: self.n_components].sum())


def pca_fit(X, variance_target: float = 0.95, max_components: Optional[int] = None) -> PcaModel:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ArgumentError(f"pca_fit needs a 2-D matrix with at least 2 rows, got shape {X.shape}")
    if not 0 < variance_target <= 1:
        raise ArgumentError(f"variance_target must lie in (0, 1], got {variance_target}")
    if max_components is not None and max_components < 1:
        raise ArgumentError(f"max_components must be >= 1, got {max_components}")

    n, p = X.shape
    mean = X.mean(axis=0)
    centred = X - mean
    cov = centred.T @ centred / (n - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(-eigvals, kind="stable")
    eigvals = np.clip(eigvals[order], 0.0, None)
    components = eigvecs[:, order].T.copy()
    # orientation: largest-magnitude entry of each component is positive
    pivots = components[np.arange(p), np.argmax(np.abs(components), axis=1)]
    components *= np.where(pivots < 0, -1.0, 1.0)[:, None]

    total = eigvals.sum()
    if not total > 0:
        msg = "data has zero variance; no components retained"
        logger.warning("pca_fit: %s", msg)
        return PcaModel(mean, components, np.zeros(p), 0, warning=msg)

    ratio = eigvals / total
    cumulative = np.cumsum(ratio)
    m = int(np.searchsorted(cumulative, variance_target - 1e-12) + 1)
    m = min(m, p)
    if max_components is not None:
        m = min(m, max_components)
    logger.debug("pca_fit: retained %d/%d components (%.4f of variance)", m, p, cumulative[m - 1])
    return PcaModel(mean, components, ratio, m)


def pca_transform(model: PcaModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.mean.shape[0]:
        raise ShapeError("pca_transform", X.shape, model.components.shape)
    return (X - model.mean) @ model.retained.T


def pca_inverse(model: PcaModel, scores) -> np.ndarray:
    return np.asarray(scores, dtype=np.float64) @ model.retained + model.mean


def binary_auc(scores, positive) -> Optional[float]:
    """Mann-Whitney AUC with midrank ties; None when either side is empty."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auc_ovr(scores, labels, n_classes: int = len(CLASS_NAMES)) -> List[Optional[float]]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim != 2 or scores.shape != (labels.shape[0], n_classes):
        raise ShapeError("auc_ovr", scores.shape, (labels.shape[0], n_classes))
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ArgumentError(f"labels must lie in [0, {n_classes})")
    return [binary_auc(scores[:, c], labels == c) for c in range(n_classes)]


class HeldOutScorer:
    """Holds test-split labels; the only way to use them is ``score``."""

    def __init__(self, labels: Sequence[int]):
        self.__labels = np.asarray(labels, dtype=np.int64)

    def __len__(self):
        return len(self.__labels)

    def score(self, probabilities) -> List[Optional[float]]:
        return auc_ovr(probabilities, self.__labels)


def _as_array(x: Union[Volume, np.ndarray]) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Volume) else x, dtype=np.float64)


def ssim3d(a, b, window: int = 7, data_range: Optional[float] = None) -> float:
    """Mean SSIM over valid positions of uniform cubic windows.

    ``data_range`` defaults to the joint intensity range of both inputs
    (1.0 when both are the same constant).
    """
    x, y = _as_array(a), _as_array(b)
    if x.shape != y.shape or x.ndim != 3:
        raise ShapeError("ssim3d", x.shape, y.shape)
    if window < 1 or window % 2 == 0 or window > min(x.shape):
        raise ArgumentError(f"ssim window must be odd and <= every dim, got {window} for {x.shape}")
    if data_range is None:
        data_range = max(x.max(), y.max()) - min(x.min(), y.min())
        data_range = float(data_range) if data_range > 0 else 1.0

    n_pts = window ** 3
    cov_norm = n_pts / (n_pts - 1) if n_pts > 1 else 1.0
    ux = uniform_filter(x, size=window)
    uy = uniform_filter(y, size=window)
    uxx = uniform_filter(x * x, size=window)
    uyy = uniform_filter(y * y, size=window)
    uxy = uniform_filter(x * y, size=window)
    vx = cov_norm * (uxx - ux * ux)
    vy = cov_norm * (uyy - uy * uy)
    vxy = cov_norm * (uxy - ux * uy)

    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    a1, a2 = 2 * ux * uy + c1, 2 * vxy + c2
    b1, b2 = ux ** 2 + uy ** 2 + c1, vx + vy + c2
    s = (a1 * a2) / (b1 * b2)

    pad = (window - 1) // 2
    valid = s[tuple(slice(pad, dim - pad) for dim in s.shape)]
    return float(valid.mean(dtype=np.float64))


def format_cell(mean: Optional[float], std: Optional[float]) -> str:
    if mean is None or std is None:
        return UNDEFINED
    return f"{mean:.2f} ± {std:.2f}"


@dataclass
class MetricReport:
    mean: List[Optional[float]]
    std: List[Optional[float]]
    n_runs: int
    classes: Sequence[str] = CLASS_NAMES

    def cells(self) -> List[str]:
        return [format_cell(m, s) for m, s in zip(self.mean, self.std)]

    def as_dict(self) -> Dict[str, str]:
        return dict(zip(self.classes, self.cells()))


def aggregate_runs(runs: Sequence[Sequence[Optional[float]]], classes: Sequence[str] = CLASS_NAMES) -> MetricReport:
    if not runs:
        raise ArgumentError("aggregate_runs needs at least one run")
    for i, run in enumerate(runs):
        if len(run) != len(classes):
            raise ArgumentError(
                f"run {i} reports {len(run)} classes, expected {len(classes)} ({', '.join(classes)})"
            )
    means: List[Optional[float]] = []
    stds: List[Optional[float]] = []
    for c in range(len(classes)):
        values = [r[c] for r in runs if r[c] is not None and not math.isnan(r[c])]
        if not values:
            means.append(None)
            stds.append(None)
            continue
        means.append(float(np.mean(values)))
        stds.append(float(np.std(values, ddof=1)) if len(values) > 1 else 0.0)
    return MetricReport(mean=means, std=stds, n_runs=len(runs), classes=tuple(classes))


@dataclass
class ComparisonTable:
    """Rows of methods (or feature sets) by progression class."""

    title: str
    rows: Dict[str, MetricReport] = field(default_factory=dict)

    def add(self, name: str, report: MetricReport) -> None:
        self.rows[name] = report

    def best(self) -> Dict[str, Optional[str]]:
        """Row with the highest mean per class column."""
        out: Dict[str, Optional[str]] = {}
        for c, cls in enumerate(CLASS_NAMES):
            scored = [(r.mean[c], name) for name, r in self.rows.items() if r.mean[c] is not None]
            out[cls] = max(scored, key=lambda t: t[0])[1] if scored else None
        return out

    def to_frame(self) -> pd.DataFrame:
        records = []
        for name, report in self.rows.items():
            for c, cls in enumerate(CLASS_NAMES):
                records.append(
                    {
                        "method": name,
                        "class": cls,
                        "mean": report.mean[c],
                        "std": report.std[c],
                        "n_runs": report.n_runs,
                    }
                )
        return pd.DataFrame(records, columns=["method", "class", "mean", "std", "n_runs"])

    @classmethod
    def from_frame(cls, title: str, frame: pd.DataFrame) -> "ComparisonTable":
        table = cls(title)
        for name, group in frame.groupby("method", sort=False):
            by_class = group.set_index("class")
            mean = [_optional(by_class.loc[c, "mean"]) for c in CLASS_NAMES]
            std = [_optional(by_class.loc[c, "std"]) for c in CLASS_NAMES]
            table.add(str(name), MetricReport(mean, std, int(group["n_runs"].iloc[0])))
        return table


def _optional(value) -> Optional[float]:
    return None if pd.isna(value) else float(value)
