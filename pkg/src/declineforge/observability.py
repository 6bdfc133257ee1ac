"""Logging setup and per-run Prometheus metrics."""

import logging
import time
from contextlib import contextmanager
from pathlib import Path
from typing import Callable, Iterator

from prometheus_client import CollectorRegistry, Counter, Histogram, write_to_textfile

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
METRICS_FILE = "metrics.prom"

logger = logging.getLogger(__name__)


def configure_logging(level: str = "INFO") -> None:
    numeric = logging.getLevelName(level.upper())
    if not isinstance(numeric, int):
        numeric = logging.INFO
    logging.basicConfig(level=numeric, format=LOG_FORMAT, force=True)


class PipelineMetrics:
    """Stage and training counters in a private registry, exported as a textfile."""

    def __init__(self):
        self.registry = CollectorRegistry()
        self.stage_runs = Counter(
            "declineforge_stage_runs",
            "Pipeline stage executions",
            ["stage", "status"],
            registry=self.registry,
        )
        self.stage_duration = Histogram(
            "declineforge_stage_duration_seconds",
            "Pipeline stage wall time",
            ["stage"],
            registry=self.registry,
        )
        self.training_epochs = Counter(
            "declineforge_training_epochs",
            "Completed training epochs",
            ["model"],
            registry=self.registry,
        )

    @contextmanager
    def stage(self, name: str) -> Iterator[None]:
        start = time.perf_counter()
        status = "error"
        try:
            yield
            status = "ok"
        finally:
            self.stage_duration.labels(stage=name).observe(time.perf_counter() - start)
            self.stage_runs.labels(stage=name, status=status).inc()

    def skipped(self, name: str) -> None:
        self.stage_runs.labels(stage=name, status="skipped").inc()

    def epoch_counter(self, model: str) -> Callable[[int, float], None]:
        child = self.training_epochs.labels(model=model)

        def on_epoch(epoch: int, loss: float) -> None:
            child.inc()

        return on_epoch

    def value(self, name: str, **labels) -> float:
        found = self.registry.get_sample_value(name, labels)
        return 0.0 if found is None else found

    def write(self, workspace: Path) -> Path:
        path = Path(workspace) / METRICS_FILE
        write_to_textfile(str(path), self.registry)
        return path
