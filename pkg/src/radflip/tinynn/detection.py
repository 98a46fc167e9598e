"""Grid-detector decoding, NMS and a VOC-style mean average precision."""
from __future__ import annotations

import numpy as np

from .ops import sigmoid, softmax


def decode(raw: np.ndarray, grid: int, num_classes: int, score_threshold: float = 0.05):
    """Per image: ``(boxes[m, 4] as x0 y0 x1 y1 in [0, 1], scores[m], classes[m])``."""
    cells = raw.reshape(raw.shape[0], grid, grid, 5 + num_classes)
    with np.errstate(all="ignore"):
        o = sigmoid(cells[..., 0])
        probs = softmax(cells[..., 5:], axis=-1)
        t = sigmoid(cells[..., 1:5])
    cls = probs.argmax(-1)
    score = o * probs.max(-1)
    gy, gx = np.meshgrid(np.arange(grid), np.arange(grid), indexing="ij")
    cy = (gy + t[..., 0]) / grid
    cx = (gx + t[..., 1]) / grid
    half_h, half_w = t[..., 2] / 2, t[..., 3] / 2
    boxes = np.stack([cx - half_w, cy - half_h, cx + half_w, cy + half_h], axis=-1)
    out = []
    for i in range(raw.shape[0]):
        keep = np.nan_to_num(score[i], nan=0.0) > score_threshold
        out.append((boxes[i][keep], score[i][keep], cls[i][keep]))
    return out


def targets_to_boxes(y: np.ndarray):
    """Ground truth from ``(n, grid, grid, 6)`` targets."""
    grid = y.shape[1]
    gy, gx = np.meshgrid(np.arange(grid), np.arange(grid), indexing="ij")
    out = []
    for t in y:
        m = t[..., 0] > 0.5
        cy = (gy[m] + t[..., 1][m]) / grid
        cx = (gx[m] + t[..., 2][m]) / grid
        hh, hw = t[..., 3][m] / 2, t[..., 4][m] / 2
        out.append((np.stack([cx - hw, cy - hh, cx + hw, cy + hh], axis=-1), t[..., 5][m].astype(np.int64)))
    return out


def iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of ``a[m, 4]`` against ``b[k, 4]``."""
    x0 = np.maximum(a[:, None, 0], b[None, :, 0])
    y0 = np.maximum(a[:, None, 1], b[None, :, 1])
    x1 = np.minimum(a[:, None, 2], b[None, :, 2])
    y1 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(x1 - x0, 0, None) * np.clip(y1 - y0, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    with np.errstate(all="ignore"):
        return np.nan_to_num(inter / (area_a[:, None] + area_b[None, :] - inter))


def nms(boxes: np.ndarray, scores: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    order = np.argsort(-scores, kind="stable")
    keep = []
    while order.size:
        i = order[0]
        keep.append(i)
        if order.size == 1:
            break
        rest = order[1:]
        order = rest[iou(boxes[i:i + 1], boxes[rest])[0] <= threshold]
    return np.array(keep, dtype=np.int64)


def average_precision(recall: np.ndarray, precision: np.ndarray) -> float:
    """Area under the precision envelope (all-point interpolation)."""
    r = np.concatenate([[0.0], recall, [1.0]])
    p = np.concatenate([[0.0], precision, [0.0]])
    p = np.maximum.accumulate(p[::-1])[::-1]
    step = np.flatnonzero(r[1:] != r[:-1])
    return float(np.sum((r[step + 1] - r[step]) * p[step + 1]))


def mean_average_precision(raw: np.ndarray, y: np.ndarray, num_classes: int,
                           iou_threshold: float = 0.5) -> float:
    """mAP in [0, 1] over classes present in the ground truth."""
    grid = y.shape[1]
    preds = decode(raw, grid, num_classes)
    truth = targets_to_boxes(y)
    aps = []
    for c in range(num_classes):
        n_true = sum(int((cls == c).sum()) for _, cls in truth)
        if n_true == 0:
            continue
        scored = []
        for i, (boxes, scores, cls) in enumerate(preds):
            m = cls == c
            if not m.any():
                continue
            b, s = boxes[m], scores[m]
            k = nms(b, s)
            scored.extend((float(s[j]), i, b[j]) for j in k)
        scored.sort(key=lambda t: -t[0])
        used = [np.zeros(int((cls == c).sum()), bool) for _, cls in truth]
        tp = np.zeros(len(scored))
        for r, (_, i, box) in enumerate(scored):
            gt = truth[i][0][truth[i][1] == c]
            if gt.shape[0] == 0:
                continue
            ov = iou(box[None], gt)[0]
            j = int(np.argmax(ov))
            if ov[j] >= iou_threshold and not used[i][j]:
                used[i][j] = True
                tp[r] = 1
        if not scored:
            aps.append(0.0)
            continue
        ctp = np.cumsum(tp)
        aps.append(average_precision(ctp / n_true, ctp / np.arange(1, len(scored) + 1)))
    return float(np.mean(aps)) if aps else 0.0
