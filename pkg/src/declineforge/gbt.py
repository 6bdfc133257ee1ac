"""Second-order gradient-boosted trees with a softmax multiclass objective.

Exact greedy split search over sorted feature values. Missing values
(NaN) are routed to whichever side gives the higher gain.
"""

import json
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.special import logsumexp, softmax

from .errors import ArgumentError, ConfigError, DataError, ShapeError

logger = logging.getLogger(__name__)

MODEL_FORMAT = "declineforge-gbt"
MODEL_VERSION = 1
PRIOR_FLOOR = 1e-6


class GbtParams(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    n_rounds: int = Field(100, ge=0)
    max_depth: int = Field(3, ge=1)
    learning_rate: float = Field(0.1, gt=0)
    l2_lambda: float = Field(1.0, gt=0)
    gamma: float = Field(0.0, ge=0)
    min_child_hessian: float = Field(1e-3, gt=0)
    # row/column subsampling; 1.0 disables
    subsample: float = Field(1.0, gt=0, le=1)
    colsample: float = Field(1.0, gt=0, le=1)
    seed: int = 0


@dataclass
class Node:
    weight: float = 0.0
    feature: Optional[int] = None
    threshold: float = 0.0
    default_left: bool = True
    left: Optional["Node"] = None
    right: Optional["Node"] = None

    @property
    def is_leaf(self) -> bool:
        return self.feature is None

    def predict(self, X: np.ndarray) -> np.ndarray:
        out = np.empty(X.shape[0])
        self._route(X, np.arange(X.shape[0]), out)
        return out

    def _route(self, X, rows, out) -> None:
        if self.is_leaf:
            out[rows] = self.weight
            return
        col = X[rows, self.feature]
        missing = np.isnan(col)
        with np.errstate(invalid="ignore"):
            go_left = np.where(missing, self.default_left, col < self.threshold)
        self.left._route(X, rows[go_left], out)
        self.right._route(X, rows[~go_left], out)

    def depth(self) -> int:
        return 0 if self.is_leaf else 1 + max(self.left.depth(), self.right.depth())

    def to_dict(self) -> Dict[str, Any]:
        if self.is_leaf:
            return {"leaf": self.weight}
        return {
            "feature": self.feature,
            "threshold": self.threshold,
            "default_left": self.default_left,
            "left": self.left.to_dict(),
            "right": self.right.to_dict(),
        }

    @classmethod
    def from_dict(cls, doc: Dict[str, Any]) -> "Node":
        if "leaf" in doc:
            return cls(weight=float(doc["leaf"]))
        return cls(
            feature=int(doc["feature"]),
            threshold=float(doc["threshold"]),
            default_left=bool(doc["default_left"]),
            left=cls.from_dict(doc["left"]),
            right=cls.from_dict(doc["right"]),
        )


@dataclass
class GbtModel:
    n_classes: int
    n_features: int
    base_score: np.ndarray
    params: GbtParams
    # trees[round][class]
    trees: List[List[Node]] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(
            {
                "format": MODEL_FORMAT,
                "version": MODEL_VERSION,
                "n_classes": self.n_classes,
                "n_features": self.n_features,
                "base_score": self.base_score.tolist(),
                "params": self.params.model_dump(),
                "trees": [[t.to_dict() for t in round_] for round_ in self.trees],
            },
            indent=1,
        )

    @classmethod
    def from_json(cls, text: str) -> "GbtModel":
        doc = json.loads(text)
        if doc.get("format") != MODEL_FORMAT or doc.get("version") != MODEL_VERSION:
            raise DataError(f"unsupported model document {doc.get('format')!r} v{doc.get('version')}")
        return cls(
            n_classes=int(doc["n_classes"]),
            n_features=int(doc["n_features"]),
            base_score=np.asarray(doc["base_score"], dtype=np.float64),
            params=GbtParams(**doc["params"]),
            trees=[[Node.from_dict(t) for t in round_] for round_ in doc["trees"]],
        )


def split_gain(GL: float, HL: float, GR: float, HR: float, lam: float, gamma: float):
    """Regularized second-order gain; works elementwise on arrays."""
    return 0.5 * (GL ** 2 / (HL + lam) + GR ** 2 / (HR + lam) - (GL + GR) ** 2 / (HL + HR + lam)) - gamma


@dataclass
class _Split:
    gain: float
    feature: int
    threshold: float
    default_left: bool
    left_rows: np.ndarray
    right_rows: np.ndarray


def _best_split(X, g, h, rows, features, params: GbtParams) -> Optional[_Split]:
    best: Optional[Tuple[float, int, float, bool, np.ndarray]] = None
    lam, mch = params.l2_lambda, params.min_child_hessian
    for f in features:
        col = X[rows, f]
        missing = np.isnan(col)
        present = np.flatnonzero(~missing)
        if present.size < 2:
            continue
        gm, hm = g[rows][missing].sum(), h[rows][missing].sum()
        order = present[np.argsort(col[present], kind="stable")]
        values = col[order]
        cg = np.cumsum(g[rows][order])
        ch = np.cumsum(h[rows][order])
        cut = np.flatnonzero(values[:-1] < values[1:])
        if cut.size == 0:
            continue
        g_tot, h_tot = cg[-1] + gm, ch[-1] + hm
        gl_p, hl_p = cg[cut], ch[cut]
        # candidates interleaved (threshold, missing-left), (threshold, missing-right)
        gl = np.stack([gl_p + gm, gl_p], axis=1).ravel()
        hl = np.stack([hl_p + hm, hl_p], axis=1).ravel()
        gr, hr = g_tot - gl, h_tot - hl
        gains = split_gain(gl, hl, gr, hr, lam, params.gamma)
        ok = (gains > 0) & (hl >= mch) & (hr >= mch)
        if not ok.any():
            continue
        gains = np.where(ok, gains, -np.inf)
        i = int(np.argmax(gains))
        if best is None or gains[i] > best[0]:
            lo, hi = values[cut[i // 2]], values[cut[i // 2] + 1]
            mid = 0.5 * (lo + hi)
            threshold = mid if mid > lo else hi
            best = (float(gains[i]), int(f), float(threshold), i % 2 == 0, col)
    if best is None:
        return None
    gain, f, threshold, default_left, col = best
    missing = np.isnan(col)
    with np.errstate(invalid="ignore"):
        go_left = np.where(missing, default_left, col < threshold)
    return _Split(gain, f, threshold, default_left, rows[go_left], rows[~go_left])


def _leaf_weight(g, h, rows, params: GbtParams) -> float:
    return float(-g[rows].sum() / (h[rows].sum() + params.l2_lambda) * params.learning_rate)


def _grow(X, g, h, rows, depth, features, params: GbtParams) -> Node:
    if depth < params.max_depth and rows.size >= 2:
        split = _best_split(X, g, h, rows, features, params)
        if split is not None:
            return Node(
                feature=split.feature,
                threshold=split.threshold,
                default_left=split.default_left,
                left=_grow(X, g, h, split.left_rows, depth + 1, features, params),
                right=_grow(X, g, h, split.right_rows, depth + 1, features, params),
            )
    return Node(weight=_leaf_weight(g, h, rows, params))


def _check_features(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ShapeError("gbt features", X.shape, ("n", "p"))
    if np.any(np.isinf(X)):
        raise ArgumentError("features contain infinite values; use NaN for missing")
    return X


def class_priors(y: np.ndarray, n_classes: int) -> np.ndarray:
    counts = np.bincount(y, minlength=n_classes).astype(np.float64)
    prior = np.maximum(counts / counts.sum(), PRIOR_FLOOR)
    return prior / prior.sum()


def fit_gbt(X, y, params: GbtParams = GbtParams(), n_classes: int = 4) -> GbtModel:
    X = _check_features(X)
    y = np.asarray(y, dtype=np.int64)
    n, p = X.shape
    if p == 0:
        raise ConfigError("fit_gbt needs at least one feature column")
    if n < 2:
        raise ArgumentError(f"fit_gbt needs at least 2 rows, got {n}")
    if y.shape != (n,):
        raise ShapeError("fit_gbt", X.shape, y.shape)
    if y.min() < 0 or y.max() >= n_classes:
        raise ArgumentError(f"labels must lie in [0, {n_classes})")

    model = GbtModel(n_classes, p, np.log(class_priors(y, n_classes)), params)
    onehot = np.eye(n_classes)[y]
    raw = np.tile(model.base_score, (n, 1))
    rng = np.random.default_rng(params.seed)
    all_rows, all_features = np.arange(n), np.arange(p)
    for r in range(params.n_rounds):
        prob = softmax(raw, axis=1)
        rows = all_rows
        if params.subsample < 1.0:
            rows = np.sort(rng.choice(n, max(2, int(round(params.subsample * n))), replace=False))
        features = all_features
        if params.colsample < 1.0:
            features = np.sort(rng.choice(p, max(1, int(round(params.colsample * p))), replace=False))
        round_trees = []
        for c in range(n_classes):
            g = prob[:, c] - onehot[:, c]
            h = prob[:, c] * (1.0 - prob[:, c])
            round_trees.append(_grow(X, g, h, rows, 0, features, params))
        for c, tree in enumerate(round_trees):
            raw[:, c] += tree.predict(X)
        model.trees.append(round_trees)
        logger.debug("gbt round %d: log-loss %.6f", r + 1, _log_loss_raw(raw, y))
    return model


def predict_raw(model: GbtModel, X) -> np.ndarray:
    X = _check_features(X)
    if X.shape[1] != model.n_features:
        raise ShapeError("predict_proba", X.shape, (X.shape[0], model.n_features))
    raw = np.tile(model.base_score, (X.shape[0], 1))
    for round_trees in model.trees:
        for c, tree in enumerate(round_trees):
            raw[:, c] += tree.predict(X)
    return raw


def predict_proba(model: GbtModel, X) -> np.ndarray:
    return softmax(predict_raw(model, X), axis=1)


def _log_loss_raw(raw: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(logsumexp(raw, axis=1) - raw[np.arange(len(y)), y]))


def log_loss_trace(model: GbtModel, X, y) -> List[float]:
    """Training log-loss after the base score and after each round."""
    X = _check_features(X)
    y = np.asarray(y, dtype=np.int64)
    raw = np.tile(model.base_score, (X.shape[0], 1))
    trace = [_log_loss_raw(raw, y)]
    for round_trees in model.trees:
        for c, tree in enumerate(round_trees):
            raw[:, c] += tree.predict(X)
        trace.append(_log_loss_raw(raw, y))
    return trace
