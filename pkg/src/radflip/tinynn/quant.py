"""Post-training INT8 quantization and clip-bound calibration."""
from __future__ import annotations

import numpy as np

from .model import FloatLayer, FloatModel, QLayer, QuantizedModel, dims_for, shape_after

QMAX_I8 = 127


def quantize_tensor(w: np.ndarray) -> tuple[np.ndarray, float]:
    """Symmetric per-tensor int8.  A zero-range tensor gets scale 1.

    The scale is rounded to float32 first, since that is what the engine
    image stores.
    """
    w = np.asarray(w, dtype=np.float64)
    peak = float(np.abs(w).max()) if w.size else 0.0
    scale = float(np.float32(peak / QMAX_I8)) if peak > 0 else 1.0
    q = np.clip(np.round(w / scale), -QMAX_I8, QMAX_I8).astype(np.int8)
    return q, scale


def dequantize_tensor(q: np.ndarray, scale: float, zero_point: int = 0) -> np.ndarray:
    return (q.astype(np.float64) - zero_point) * scale


def quantize_bias(b: np.ndarray, weight_scale: float) -> tuple[np.ndarray, float]:
    """Bias as int32 in weight-scale units, added straight into the accumulator."""
    lim = np.iinfo(np.int32)
    q = np.clip(np.round(np.asarray(b, np.float64) / weight_scale), lim.min, lim.max)
    return q.astype(np.int32), float(np.float32(weight_scale))


def calibrate_theta(model: FloatModel, calibration_set: np.ndarray) -> dict[int, float]:
    """Per-layer clip bound: the largest pre-activation seen on ``calibration_set``.

    Bounds are gathered with every clip disabled, so a layer's value does not
    depend on the bounds chosen upstream.
    """
    x = np.asarray(calibration_set)
    if x.shape[0] == 0:
        raise ValueError("calibration set is empty")
    open_model = FloatModel(model.task, model.input_shape, model.num_classes,
                            [FloatLayer(**{**l.__dict__, "theta": float("inf")}) for l in model.layers],
                            model.grid)
    found = {}
    for start in range(0, x.shape[0], 1024):
        for i, v in open_model.preactivation_max(x[start:start + 1024]).items():
            found[i] = max(found.get(i, -np.inf), v)
    return found


def apply_theta(model: FloatModel, thetas: dict[int, float]) -> FloatModel:
    layers = []
    for i, l in enumerate(model.layers):
        theta = l.theta
        if i in thetas and l.activation in ("clip", "logclip"):
            # a layer whose pre-activations never go positive still needs a positive bound
            theta = max(float(thetas[i]), np.finfo(np.float32).tiny)
        layers.append(FloatLayer(**{**l.__dict__, "theta": theta}))
    return FloatModel(model.task, model.input_shape, model.num_classes, layers, model.grid)


def quantize(model: FloatModel) -> QuantizedModel:
    """Per-tensor affine INT8 copy of a calibrated float model."""
    layers = []
    backbone = model.backbone
    heads = model.heads
    shapes = {0: tuple(model.input_shape)}
    shape = tuple(model.input_shape)
    for pos, i in enumerate(backbone):
        layers.append(_quantize_layer(model.layers[i], shape))
        shape = shape_after(shape, layers[-1].kind, layers[-1].dims)
        shapes[pos + 1] = shape
    for attach, idx in sorted(heads.items()):
        shape = shapes[attach]
        for j in idx:
            layers.append(_quantize_layer(model.layers[j], shape))
            shape = shape_after(shape, layers[-1].kind, layers[-1].dims)
    return QuantizedModel(model.task, tuple(model.input_shape), model.num_classes, layers, model.grid)


def _quantize_layer(layer: FloatLayer, in_shape) -> QLayer:
    theta = 0.0 if np.isinf(layer.theta) else float(layer.theta)
    if float(np.float32(theta)) < theta:  # the image stores f32; never round a bound down
        theta = float(np.nextafter(np.float32(theta), np.float32(np.inf)))
    if layer.activation in ("clip", "logclip") and not theta > 0:
        raise ValueError("clip bounds must be calibrated before quantization")
    dims = dims_for(layer.kind, in_shape, layer.weight, layer.kernel, layer.stride)
    if layer.kind not in ("dense", "conv"):
        return QLayer(layer.kind, layer.activation, layer.group, dims, theta)
    q, scale = quantize_tensor(layer.weight)
    qb, bias_scale = quantize_bias(layer.bias, scale)
    return QLayer(layer.kind, layer.activation, layer.group, dims, theta, scale, 0,
                  q.ravel(), qb, bias_scale)


def calibrate_engine(model: QuantizedModel, calibration_set: np.ndarray) -> dict[int, float]:
    """:func:`calibrate_theta` measured on the integer runtime instead of the float model."""
    from .runtime import Runtime

    x = np.asarray(calibration_set)
    if x.shape[0] == 0:
        raise ValueError("calibration set is empty")
    return Runtime(model).preactivation_max(x)


def set_engine_thetas(model: QuantizedModel, thetas: dict[int, float],
                      activation: str | None = None) -> QuantizedModel:
    """Copy of ``model`` with new clip bounds; ``activation`` optionally swaps
    every ReLU layer that received a bound to ``clip`` or ``logclip``."""
    if activation not in (None, "clip", "logclip"):
        raise ValueError(f"cannot calibrate towards activation {activation!r}")
    layers = []
    for i, l in enumerate(model.layers):
        if i in thetas and l.activation != "none":
            act = activation if activation and l.activation == "relu" else l.activation
            theta = max(float(thetas[i]), float(np.finfo(np.float32).tiny))
            if float(np.float32(theta)) < theta:
                theta = float(np.nextafter(np.float32(theta), np.float32(np.inf)))
            l = l.replace(activation=act, theta=theta)
        layers.append(l)
    return QuantizedModel(model.task, model.input_shape, model.num_classes, layers, model.grid)
