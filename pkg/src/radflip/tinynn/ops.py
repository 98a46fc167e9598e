"""Array kernels shared by the float reference and the quantized runtime."""
from __future__ import annotations

import numpy as np

QMAX_U8 = 255


def im2col(x: np.ndarray, kernel: int, stride: int):
    """``(n, C, H, W)`` -> ``((n, C*k*k, Ho*Wo), (Ho, Wo))`` with zero 'same' padding."""
    n, c, h, w = x.shape
    p = kernel // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kernel, kernel), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (n, C, Ho, Wo, k, k)
    ho, wo = win.shape[2], win.shape[3]
    return win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kernel * kernel, ho * wo), (ho, wo)


def pool(x: np.ndarray, kind: str, kernel: int, stride: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(x, (kernel, kernel), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    return win.max(axis=(4, 5)) if kind == "maxpool" else win.mean(axis=(4, 5))


def global_pool(x: np.ndarray) -> np.ndarray:
    return x.mean(axis=(2, 3))


def quantize_activations(h: np.ndarray):
    """Per-sample asymmetric uint8 quantization over the whole tensor.

    Returns ``(q - zero_point, scale)`` with ``q - zero_point`` as float64
    integers ready for an exact BLAS product.
    """
    flat = h.reshape(h.shape[0], -1)
    lo = np.minimum(flat.min(axis=1), 0.0)
    hi = np.maximum(flat.max(axis=1), 0.0)
    scale = (hi - lo) / QMAX_U8
    scale = np.where(scale > 0, scale, 1.0)
    zp = np.clip(np.round(-lo / scale), 0, QMAX_U8)
    bshape = (-1,) + (1,) * (h.ndim - 1)
    q = np.clip(np.round(h / scale.reshape(bshape)) + zp.reshape(bshape), 0, QMAX_U8)
    return q - zp.reshape(bshape), scale


def wrap_int32(acc: np.ndarray) -> np.ndarray:
    """Two's-complement wrap of exact integer-valued floats, as a 32-bit accumulator would."""
    a = acc.astype(np.int64)
    return ((a + (1 << 31)) & 0xFFFFFFFF) - (1 << 31)


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))
