"""Early-exit decisions for classifier and detector heads."""
from __future__ import annotations

import numpy as np

from .ops import sigmoid, softmax
from .spec import DetectionSet


def should_exit_classifier(class_scores, threshold: float) -> bool:
    """True iff the top class probability is strictly above ``threshold``."""
    return bool(np.max(np.asarray(class_scores, dtype=np.float64)) > threshold)


def should_exit_detector(dets: DetectionSet, theta_presence: float, threshold: float) -> bool:
    """Mean of ``o * c`` over boxes with ``o > theta_presence`` must exceed ``threshold``.

    An empty set of present boxes never exits.
    """
    keep = dets.objectness > theta_presence
    if not keep.any():
        return False
    return bool(np.mean(dets.objectness[keep] * dets.class_conf[keep]) > threshold)


def classifier_exit_mask(logits: np.ndarray, threshold: float) -> np.ndarray:
    with np.errstate(all="ignore"):
        return softmax(logits, axis=1).max(axis=1) > threshold


def detection_sets(raw: np.ndarray, grid: int, num_classes: int) -> tuple[np.ndarray, np.ndarray]:
    """Objectness and max class probability per grid cell, ``(n, grid*grid)`` each."""
    cells = raw.reshape(raw.shape[0], grid * grid, 5 + num_classes)
    with np.errstate(all="ignore"):
        o = sigmoid(cells[..., 0])
        c = softmax(cells[..., 5:], axis=-1).max(axis=-1)
    return o, c


def detector_exit_mask(raw: np.ndarray, grid: int, num_classes: int, theta_presence: float,
                       threshold: float) -> np.ndarray:
    o, c = detection_sets(raw, grid, num_classes)
    keep = o > theta_presence
    count = keep.sum(axis=1)
    with np.errstate(all="ignore"):
        score = np.where(keep, o * c, 0.0).sum(axis=1) / np.maximum(count, 1)
    return (count > 0) & (score > threshold)
