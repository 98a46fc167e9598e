"""Float reference models and their quantized counterparts.

Both share one layer list.  ``group`` 0 marks backbone layers; group ``g``
marks an exit head attached after backbone layer ``g`` (1-based).  Heads
follow the backbone in the list.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import activations, ops
from .spec import next_shape

KIND_CODES = {"dense": 1, "conv": 2, "maxpool": 3, "avgpool": 4, "gap": 5}
ACT_CODES = {"none": 0, "relu": 1, "clip": 2, "logclip": 3}
TASK_CODES = {"classification": 0, "detection": 1}


def _group_index(groups) -> tuple[list[int], dict[int, list[int]]]:
    backbone = [i for i, g in enumerate(groups) if g == 0]
    heads: dict[int, list[int]] = {}
    for i, g in enumerate(groups):
        if g:
            heads.setdefault(g, []).append(i)
    return backbone, heads


def float_activation(kind: str, pre: np.ndarray, theta: float) -> np.ndarray:
    """Training-time activations: an infinite ``theta`` means 'not yet calibrated'."""
    if kind == "logclip" and np.isinf(theta):
        return np.log1p(np.maximum(pre, 0.0))
    if kind == "clip" and np.isinf(theta):
        return np.maximum(pre, 0.0)
    return activations.apply(kind, pre, theta)


@dataclass
class FloatLayer:
    kind: str
    activation: str = "none"
    theta: float = float("inf")
    group: int = 0
    weight: np.ndarray | None = None
    bias: np.ndarray | None = None
    kernel: int = 1
    stride: int = 1

    def preactivation(self, h: np.ndarray) -> np.ndarray:
        # einsum rather than BLAS: a sample's result must not depend on the
        # batch it was computed in, or calibrated bounds drift by an ulp
        if self.kind == "dense":
            return np.einsum("nk,ok->no", h.reshape(h.shape[0], -1), self.weight) + self.bias
        if self.kind == "conv":
            cols, (ho, wo) = ops.im2col(h, self.kernel, self.stride)
            out = np.einsum("ok,nkp->nop", self.weight.reshape(self.weight.shape[0], -1), cols)
            return (out + self.bias[None, :, None]).reshape(h.shape[0], -1, ho, wo)
        if self.kind in ("maxpool", "avgpool"):
            return ops.pool(h, self.kind, self.kernel, self.stride)
        return ops.global_pool(h)

    def __call__(self, h: np.ndarray) -> np.ndarray:
        return float_activation(self.activation, self.preactivation(h), self.theta)


@dataclass
class FloatModel:
    task: str
    input_shape: tuple[int, int, int]
    num_classes: int
    layers: list[FloatLayer]
    grid: int = 0

    @property
    def backbone(self) -> list[int]:
        return _group_index([l.group for l in self.layers])[0]

    @property
    def heads(self) -> dict[int, list[int]]:
        return _group_index([l.group for l in self.layers])[1]

    def forward(self, x: np.ndarray, with_heads: bool = False):
        """Final output, plus ``{attach: head output}`` when ``with_heads``."""
        h = np.asarray(x, dtype=np.float64)
        heads = self.heads
        outs = {}
        for pos, i in enumerate(self.backbone):
            h = self.layers[i](h)
            if with_heads and pos + 1 in heads:
                z = h
                for j in heads[pos + 1]:
                    z = self.layers[j](z)
                outs[pos + 1] = z
        return (h, outs) if with_heads else h

    def preactivation_max(self, x: np.ndarray) -> dict[int, float]:
        """Largest pre-activation value of every activated layer over ``x``."""
        h = np.asarray(x, dtype=np.float64)
        heads = self.heads
        found: dict[int, float] = {}

        def step(i, z):
            layer = self.layers[i]
            pre = layer.preactivation(z)
            if layer.activation != "none":
                found[i] = float(pre.max())
            return float_activation(layer.activation, pre, layer.theta)

        for pos, i in enumerate(self.backbone):
            h = step(i, h)
            z = h
            for j in heads.get(pos + 1, ()):
                z = step(j, z)
        return found


@dataclass
class QLayer:
    """One engine record.  ``weight`` is flat int8, ``bias`` int32 in ``bias_scale`` units."""

    kind: str
    activation: str = "none"
    group: int = 0
    dims: tuple[int, int, int, int] = (0, 0, 0, 0)
    theta: float = 0.0
    scale: float = 1.0
    zero_point: int = 0
    weight: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int8))
    bias: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int32))
    bias_scale: float = 1.0

    @property
    def kernel(self) -> int:
        return self.dims[2]

    @property
    def stride(self) -> int:
        return self.dims[3]

    @property
    def out_units(self) -> int:
        return self.dims[1]

    def weight_matrix(self) -> np.ndarray:
        """Integer weights minus zero point as float64 ``(out, fan_in)``."""
        w = self.weight.astype(np.float64) - float(self.zero_point)
        return w.reshape(self.dims[1], -1)

    def replace(self, **kw) -> "QLayer":
        return replace(self, **kw)


@dataclass
class QuantizedModel:
    task: str
    input_shape: tuple[int, int, int]
    num_classes: int
    layers: list[QLayer]
    grid: int = 0

    @property
    def backbone(self) -> list[int]:
        return _group_index([l.group for l in self.layers])[0]

    @property
    def heads(self) -> dict[int, list[int]]:
        return _group_index([l.group for l in self.layers])[1]

    @property
    def has_exits(self) -> bool:
        return any(l.group for l in self.layers)

    @property
    def output_size(self) -> int:
        if self.task == "classification":
            return self.num_classes
        return self.grid * self.grid * (5 + self.num_classes)

    def without_exits(self) -> "QuantizedModel":
        return QuantizedModel(self.task, self.input_shape, self.num_classes,
                              [l for l in self.layers if l.group == 0], self.grid)


def dims_for(kind: str, in_shape: tuple[int, ...], weight: np.ndarray | None,
             kernel: int, stride: int) -> tuple[int, int, int, int]:
    if kind == "dense":
        return (int(np.prod(in_shape)), int(weight.shape[0]), 1, 1)
    if kind == "conv":
        return (int(in_shape[0]), int(weight.shape[0]), kernel, stride)
    if kind in ("maxpool", "avgpool"):
        return (0, 0, kernel, stride)
    return (0, 0, 0, 0)


def shape_after(in_shape: tuple[int, ...], kind: str, dims) -> tuple[int, ...]:
    return next_shape(in_shape, kind, dims[1], dims[2] or 1, dims[3] or 1)

