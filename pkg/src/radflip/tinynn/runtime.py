"""Batched INT8 inference with optional early exits.

Per weight layer: activations are quantized per sample to uint8, multiplied
against the int8 weights with a 32-bit accumulator, rescaled to real values
and passed through the activation.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import activations, ops
from .engine import EngineImage, deserialize
from .exits import classifier_exit_mask, detector_exit_mask
from .model import QuantizedModel
from .spec import ExitPolicy

NO_EXITS = ExitPolicy(enabled=False)
_INT32_LIMIT = float(1 << 31)


@dataclass
class ForwardResult:
    """``outputs`` holds the logits (or raw grid) of whichever head answered."""

    outputs: np.ndarray
    exit_index: np.ndarray
    layers_executed: np.ndarray

    @property
    def predictions(self) -> np.ndarray:
        with np.errstate(all="ignore"):
            return np.argmax(self.outputs, axis=1)


class Runtime:
    def __init__(self, model: QuantizedModel):
        self.model = model
        self.layers = model.layers
        self.backbone = model.backbone
        self.heads = model.heads
        self.n_backbone = len(self.backbone)
        self._w = [l.weight_matrix() if l.kind in ("dense", "conv") else None for l in self.layers]
        self._b = [l.bias.astype(np.float64) * l.bias_scale if l.kind in ("dense", "conv") else None
                   for l in self.layers]

    @classmethod
    def of(cls, engine) -> "Runtime":
        if isinstance(engine, Runtime):
            return engine
        if isinstance(engine, QuantizedModel):
            return cls(engine)
        if isinstance(engine, EngineImage):
            engine = engine.data
        return cls(deserialize(engine))

    # single layers, split so the scanner can reuse the pieces
    def layer_inputs(self, i: int, h: np.ndarray):
        """Quantized, zero-point-centred operand of weight layer ``i``."""
        qa, sa = ops.quantize_activations(h)
        layer = self.layers[i]
        if layer.kind == "dense":
            return qa.reshape(qa.shape[0], -1), sa, None
        cols, spatial = ops.im2col(qa, layer.kernel, layer.stride)
        return cols, sa, spatial

    def accumulate(self, i: int, operand: np.ndarray) -> np.ndarray:
        acc = operand @ self._w[i].T if self.layers[i].kind == "dense" else np.matmul(self._w[i], operand)
        if np.abs(acc).max(initial=0.0) >= _INT32_LIMIT:
            acc = ops.wrap_int32(acc).astype(np.float64)
        return acc

    def preactivation(self, i: int, acc: np.ndarray, sa: np.ndarray, spatial=None) -> np.ndarray:
        layer = self.layers[i]
        bshape = (-1,) + (1,) * (acc.ndim - 1)
        bias = self._b[i] if acc.ndim == 2 else self._b[i][:, None]
        pre = layer.scale * sa.reshape(bshape) * acc + bias
        if spatial is not None:
            pre = pre.reshape(acc.shape[0], acc.shape[1], *spatial)
        return pre

    def finish(self, i: int, acc: np.ndarray, sa: np.ndarray, spatial=None) -> np.ndarray:
        layer = self.layers[i]
        return activations.apply(layer.activation, self.preactivation(i, acc, sa, spatial), layer.theta)

    def layer(self, i: int, h: np.ndarray, open_clip: bool = False) -> np.ndarray:
        layer = self.layers[i]
        if layer.kind in ("dense", "conv"):
            operand, sa, spatial = self.layer_inputs(i, h)
            if not open_clip:
                return self.finish(i, self.accumulate(i, operand), sa, spatial)
            pre = self.preactivation(i, self.accumulate(i, operand), sa, spatial)
            self._seen[i] = max(self._seen.get(i, -np.inf), float(pre.max(initial=-np.inf)))
            return activations.apply(layer.activation, pre, np.inf)
        if layer.kind in ("maxpool", "avgpool"):
            return ops.pool(h, layer.kind, layer.kernel, layer.stride)
        return ops.global_pool(h)

    def head(self, attach: int, h: np.ndarray) -> np.ndarray:
        for j in self.heads[attach]:
            h = self.layer(j, h)
        return h.reshape(h.shape[0], -1)

    def exit_mask(self, out: np.ndarray, policy: ExitPolicy) -> np.ndarray:
        m = self.model
        if m.task == "classification":
            return classifier_exit_mask(out, policy.threshold)
        return detector_exit_mask(out, m.grid, m.num_classes, policy.presence, policy.threshold)

    # whole network
    def new_result(self, n: int) -> ForwardResult:
        return ForwardResult(np.zeros((n, self.model.output_size)),
                             np.zeros(n, np.int64), np.zeros(n, np.int64))

    def run_from(self, h: np.ndarray, done: int, policy: ExitPolicy, res: ForwardResult,
                 idx: np.ndarray | None = None) -> ForwardResult:
        """Continue inference for samples ``idx`` whose state after ``done``
        backbone layers is ``h``; results land in ``res`` rows ``idx``."""
        if idx is None:
            idx = np.arange(h.shape[0])
        with np.errstate(all="ignore"):
            while idx.size:
                if done == self.n_backbone:
                    res.outputs[idx] = h.reshape(h.shape[0], -1)
                    res.exit_index[idx] = done
                    res.layers_executed[idx] = done
                    break
                if policy.enabled and done in self.heads:
                    out = self.head(done, h)
                    leave = self.exit_mask(out, policy)
                    if leave.any():
                        res.outputs[idx[leave]] = out[leave]
                        res.exit_index[idx[leave]] = done
                        res.layers_executed[idx[leave]] = done
                        idx, h = idx[~leave], h[~leave]
                        continue
                h = self.layer(self.backbone[done], h)
                done += 1
        return res

    def forward(self, x: np.ndarray, policy: ExitPolicy = NO_EXITS, batch: int = 1024) -> ForwardResult:
        x = np.asarray(x, dtype=np.float64)
        res = self.new_result(x.shape[0])
        for s in range(0, x.shape[0], batch):
            sl = np.arange(s, min(s + batch, x.shape[0]))
            self.run_from(x[sl], 0, policy, res, sl)
        return res

    def preactivation_max(self, x: np.ndarray, batch: int = 1024) -> dict[int, float]:
        """Largest pre-activation of every activated weight layer over ``x``,
        with every clip bound lifted so upstream bounds do not matter."""
        self._seen: dict[int, float] = {}
        x = np.asarray(x, dtype=np.float64)
        with np.errstate(all="ignore"):
            for s in range(0, x.shape[0], batch):
                h = x[s:s + batch]
                for pos, i in enumerate(self.backbone):
                    h = self.layer(i, h, open_clip=True)
                    z = h
                    for j in self.heads.get(pos + 1, ()):
                        z = self.layer(j, z, open_clip=True)
        seen, self._seen = self._seen, {}
        return {i: v for i, v in seen.items() if self.layers[i].activation != "none"}

    def trace(self, x: np.ndarray) -> list[np.ndarray]:
        """Backbone state after every layer (index 0 is the input), exits ignored."""
        with np.errstate(all="ignore"):
            states = [np.asarray(x, dtype=np.float64)]
            for i in self.backbone:
                states.append(self.layer(i, states[-1]))
        return states


def forward(engine, inputs: np.ndarray, policy: ExitPolicy = NO_EXITS) -> ForwardResult:
    """Run a batch through ``engine`` (image, bytes or quantized model).

    A single unbatched input is accepted too; the result then has one row.
    """
    rt = Runtime.of(engine)
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim == len(rt.model.input_shape):
        x = x[None]
    return rt.forward(x, policy)
