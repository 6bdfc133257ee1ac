"""SVG figures and text report tables rendered through Jinja2 templates."""

import logging
from pathlib import Path
from typing import Dict, List, Mapping, Sequence, Tuple

import numpy as np
from jinja2 import Environment, FileSystemLoader, StrictUndefined

from .metrics import CLASS_NAMES, ComparisonTable
from .models import ReconHistory
from .synthcohort import Trajectory
from .trajectory import ClusterModel, ProgressionLabel

logger = logging.getLogger(__name__)

TEMPLATE_DIR = Path(__file__).parent / "templates"
PANEL_W, PANEL_H, MARGIN = 320, 220, 40
CLASS_COLOURS = ("#2b8cbe", "#78c679", "#fd8d3c", "#de2d26")

_env = Environment(
    loader=FileSystemLoader(str(TEMPLATE_DIR)),
    undefined=StrictUndefined,
    trim_blocks=True,
    lstrip_blocks=True,
    keep_trailing_newline=True,
)


def render(template: str, **context) -> str:
    return _env.get_template(template).render(**context)


class _Scale:
    """Maps data ranges onto a panel's drawing box (SVG y grows downward)."""

    def __init__(self, xs, ys, width=PANEL_W, height=PANEL_H, margin=MARGIN):
        xs, ys = np.asarray(xs, dtype=float), np.asarray(ys, dtype=float)
        self.x0, self.x1 = float(xs.min()), float(xs.max())
        self.y0, self.y1 = float(ys.min()), float(ys.max())
        if self.x1 == self.x0:
            self.x1 = self.x0 + 1.0
        if self.y1 == self.y0:
            self.y1 = self.y0 + 1.0
        self.width, self.height, self.margin = width, height, margin

    def point(self, x, y) -> Tuple[float, float]:
        px = self.margin + (x - self.x0) / (self.x1 - self.x0) * (self.width - 2 * self.margin)
        py = self.height - self.margin - (y - self.y0) / (self.y1 - self.y0) * (self.height - 2 * self.margin)
        return round(px, 2), round(py, 2)

    def polyline(self, xs, ys) -> str:
        return " ".join("%s,%s" % self.point(x, y) for x, y in zip(xs, ys))


def elbow_svg(curve: Sequence[Tuple[int, float]], chosen_k: int) -> str:
    ks = [k for k, _ in curve]
    inertias = [i for _, i in curve]
    scale = _Scale(ks, [0.0] + inertias, width=2 * PANEL_W)
    points = [{"k": k, "xy": scale.point(k, i), "inertia": i} for k, i in curve]
    return render(
        "elbow.svg.j2",
        width=scale.width,
        height=scale.height,
        margin=MARGIN,
        line=scale.polyline(ks, inertias),
        points=points,
        chosen_k=chosen_k,
    )


def trajectories_svg(
    model: ClusterModel,
    trajectories: Sequence[Trajectory],
    labels: Mapping[str, ProgressionLabel],
) -> str:
    """One panel per cluster: member value series with the barycenter on top."""
    by_id = {t.subject_id: t for t in trajectories}
    all_values = np.concatenate([t.values for t in trajectories] + [b for b in model.barycenters])
    longest = max(max(len(t) for t in trajectories), max(len(b) for b in model.barycenters))
    panels = []
    for c in range(model.k):
        members = [by_id[s] for s in model.members(c) if s in by_id]
        scale = _Scale([0, longest - 1], all_values)
        title = f"cluster {c}"
        colour = "#444444"
        if members and members[0].subject_id in labels:
            label = labels[members[0].subject_id]
            title = f"{label.title} (n={len(members)})"
            colour = CLASS_COLOURS[int(label)]
        panels.append(
            {
                "x": (c % 2) * PANEL_W,
                "y": (c // 2) * PANEL_H,
                "title": title,
                "colour": colour,
                "members": [scale.polyline(range(len(t)), t.values) for t in members],
                "barycenter": scale.polyline(range(len(model.barycenters[c])), model.barycenters[c]),
            }
        )
    rows = (model.k + 1) // 2
    return render(
        "trajectories.svg.j2",
        width=2 * PANEL_W,
        height=rows * PANEL_H,
        panel_w=PANEL_W,
        panel_h=PANEL_H,
        margin=MARGIN,
        panels=panels,
    )


def recon_svg(history: ReconHistory) -> str:
    epochs = list(range(1, len(history) + 1)) or [1]
    mse = history.train_mse or [0.0]
    ssim = history.monitor_ssim or [0.0]
    mse_scale = _Scale(epochs, [0.0] + list(mse))
    ssim_scale = _Scale(epochs, [0.0, 1.0])
    return render(
        "recon.svg.j2",
        width=2 * PANEL_W,
        height=PANEL_H,
        panel_w=PANEL_W,
        margin=MARGIN,
        mse_line=mse_scale.polyline(epochs, mse),
        ssim_line=ssim_scale.polyline(epochs, ssim),
        final_mse=mse[-1],
        final_ssim=ssim[-1],
    )


def report_table(table: ComparisonTable) -> str:
    """Plain-text table; ``*`` marks the best mean in each column."""
    best = table.best()
    rows: List[Dict[str, object]] = []
    for name, report in table.rows.items():
        cells = [cell + ("*" if best[cls] == name else " ") for cls, cell in zip(CLASS_NAMES, report.cells())]
        rows.append({"name": name, "cells": cells, "n_runs": report.n_runs})
    name_width = max([len("Method")] + [len(r["name"]) for r in rows])
    cell_width = max([len(c) for c in CLASS_NAMES] + [len(c) for r in rows for c in r["cells"]])
    return render(
        "report_table.txt.j2",
        title=table.title,
        classes=CLASS_NAMES,
        rows=rows,
        name_width=name_width,
        cell_width=cell_width,
    )


def write_text(path: Path, text: str) -> None:
    Path(path).write_text(text, encoding="utf-8")
    logger.debug("wrote %s", path)
