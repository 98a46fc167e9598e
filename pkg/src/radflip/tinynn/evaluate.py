"""Task performance in percent: top-1 accuracy or mAP@0.5."""
from __future__ import annotations

import numpy as np

from .data import Dataset
from .detection import mean_average_precision
from .runtime import NO_EXITS, Runtime
from .spec import ExitPolicy


def score_outputs(outputs: np.ndarray, dataset: Dataset) -> float:
    if dataset.task == "classification":
        with np.errstate(all="ignore"):
            return 100.0 * float(np.mean(np.argmax(outputs, axis=1) == dataset.y))
    return 100.0 * mean_average_precision(outputs, dataset.y, len(dataset.classes))


def correct_counts(outputs: np.ndarray, labels: np.ndarray) -> int:
    with np.errstate(all="ignore"):
        return int(np.sum(np.argmax(outputs, axis=1) == labels))


def evaluate(engine, dataset: Dataset, policy: ExitPolicy = NO_EXITS) -> tuple[float, float]:
    """``(performance %, mean backbone layers executed)``."""
    res = Runtime.of(engine).forward(dataset.x, policy)
    return score_outputs(res.outputs, dataset), float(res.layers_executed.mean())
