"""Architecture and policy descriptions shared by training, quantization and the engine."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

ACTIVATION_KINDS = ("none", "relu", "clip", "logclip")
LAYER_KINDS = ("dense", "conv", "maxpool", "avgpool", "gap")
TASK_KINDS = ("classification", "detection")
#: activation used by hidden layers in each model variant
VARIANT_ACTIVATION = {"clean": "relu", "clip": "clip", "rednet": "logclip"}


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class ActivationSpec:
    kind: str = "relu"
    theta: float = 0.0

    def __post_init__(self):
        if self.kind not in ACTIVATION_KINDS:
            raise SpecError(f"unknown activation {self.kind!r}")
        if self.theta < 0:
            raise SpecError("theta must be >= 0")


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int = 0
    bit_width: int = 8

    def __post_init__(self):
        if self.bit_width != 8:
            raise SpecError("only 8-bit quantization is supported")


@dataclass(frozen=True)
class LayerSpec:
    """One backbone or head layer.

    ``out`` is the unit count (dense) or output channels (conv); ``kernel``
    and ``stride`` apply to conv and pooling.  Batch normalization is a flag
    on dense/conv layers and is folded into the weights at quantization.
    """

    kind: str
    out: int = 0
    kernel: int = 1
    stride: int = 1
    batchnorm: bool = False
    activation: ActivationSpec = ActivationSpec("none")

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise SpecError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("dense", "conv") and self.out < 1:
            raise SpecError(f"{self.kind} layer needs out >= 1")
        if self.kernel < 1 or self.stride < 1:
            raise SpecError("kernel and stride must be >= 1")
        if self.batchnorm and self.kind not in ("dense", "conv"):
            raise SpecError("batchnorm only follows dense or conv layers")

    @property
    def has_weights(self) -> bool:
        return self.kind in ("dense", "conv")


@dataclass(frozen=True)
class InternalClassifier:
    """Exit head attached after backbone layer ``attach_index`` (1-based).

    Dense features get ``dense(hidden) + BN + act -> dense(out)``; feature
    maps get ``conv3x3(hidden) + BN + act -> global pool -> dense(out)``.
    """

    attach_index: int
    hidden: int = 8


@dataclass(frozen=True)
class ExitPolicy:
    threshold: float = 0.9
    presence: float = 0.5
    enabled: bool = True

    def __post_init__(self):
        if not 0.0 <= self.presence <= 1.0:
            raise SpecError("presence criterion must lie in [0, 1]")


@dataclass(frozen=True)
class DetectionSet:
    """Pre-NMS boxes: objectness ``o`` and max class probability ``c`` per box."""

    objectness: np.ndarray
    class_conf: np.ndarray
    boxes: np.ndarray | None = None
    classes: np.ndarray | None = None

    def __post_init__(self):
        o = np.asarray(self.objectness, dtype=np.float64)
        c = np.asarray(self.class_conf, dtype=np.float64)
        if o.shape != c.shape:
            raise SpecError("objectness and class confidence must align")
        if o.size and (o.min() < 0 or o.max() > 1 or c.min() < 0 or c.max() > 1):
            raise SpecError("detection probabilities must lie in [0, 1]")
        object.__setattr__(self, "objectness", o)
        object.__setattr__(self, "class_conf", c)


@dataclass(frozen=True)
class ModelSpec:
    task: str
    input_shape: tuple[int, int, int]
    num_classes: int
    layers: tuple[LayerSpec, ...]
    internal_exits: tuple[InternalClassifier, ...] = ()
    grid: int = 0

    def __post_init__(self):
        if self.task not in TASK_KINDS:
            raise SpecError(f"unknown task {self.task!r}")
        if self.num_classes < 1:
            raise SpecError("num_classes must be >= 1")
        if self.task == "detection" and self.grid < 1:
            raise SpecError("detection models need grid >= 1")
        if not self.layers or not self.layers[-1].has_weights:
            raise SpecError("the final layer must be dense or conv")
        n_hidden = len(self.layers) - 1
        prev = 0
        for e in self.internal_exits:
            if not 1 <= e.attach_index <= n_hidden:
                raise SpecError(f"exit index {e.attach_index} outside [1, {n_hidden}]")
            if e.attach_index <= prev:
                raise SpecError("exit indices must be strictly increasing")
            prev = e.attach_index
        shapes = layer_shapes(self)
        if int(np.prod(shapes[-1])) != self.output_size:
            raise SpecError(f"final layer yields {shapes[-1]}, expected {self.output_size} values")

    @property
    def n_hidden(self) -> int:
        return len(self.layers) - 1

    @property
    def output_size(self) -> int:
        if self.task == "classification":
            return self.num_classes
        return self.grid * self.grid * (5 + self.num_classes)

    def with_activation(self, kind: str) -> "ModelSpec":
        """Copy with every hidden weight layer switched to ``kind``."""
        layers = tuple(
            LayerSpec(l.kind, l.out, l.kernel, l.stride, l.batchnorm,
                      ActivationSpec(kind) if l.has_weights and i < self.n_hidden else l.activation)
            for i, l in enumerate(self.layers))
        return ModelSpec(self.task, self.input_shape, self.num_classes, layers,
                         self.internal_exits, self.grid)

    def without_exits(self) -> "ModelSpec":
        return ModelSpec(self.task, self.input_shape, self.num_classes, self.layers, (), self.grid)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        try:
            layers = []
            for l in d["layers"]:
                l = dict(l)
                act = l.pop("activation", None) or {"kind": "none"}
                layers.append(LayerSpec(activation=ActivationSpec(**act), **l))
            exits = tuple(InternalClassifier(**e) for e in d.get("internal_exits", ()))
            return cls(d["task"], tuple(d["input_shape"]), int(d["num_classes"]), tuple(layers),
                       exits, int(d.get("grid", 0)))
        except (KeyError, TypeError) as exc:
            raise SpecError(f"malformed model spec: {exc}") from None


def load_model_spec(path: str | Path) -> ModelSpec:
    return ModelSpec.from_dict(json.loads(Path(path).read_text()))


def conv_out(size: int, kernel: int, stride: int) -> int:
    return (size + 2 * (kernel // 2) - kernel) // stride + 1


def next_shape(shape: tuple[int, ...], kind: str, out: int, kernel: int, stride: int) -> tuple[int, ...]:
    """Output shape of one layer; dense layers flatten their input."""
    if kind == "dense":
        return (out,)
    if len(shape) != 3:
        raise SpecError(f"{kind} layer needs a (C, H, W) input, got {shape}")
    c, h, w = shape
    if kind == "conv":
        return (out, conv_out(h, kernel, stride), conv_out(w, kernel, stride))
    if kind in ("maxpool", "avgpool"):
        if h < kernel or w < kernel:
            raise SpecError("pooling window larger than the feature map")
        return (c, (h - kernel) // stride + 1, (w - kernel) // stride + 1)
    if kind == "gap":
        return (c,)
    raise SpecError(f"unknown layer kind {kind!r}")


def layer_shapes(spec: ModelSpec) -> list[tuple[int, ...]]:
    """Output shape of every backbone layer, input first."""
    shapes = [tuple(spec.input_shape)]
    for l in spec.layers:
        shapes.append(next_shape(shapes[-1], l.kind, l.out, l.kernel, l.stride))
    return shapes


def head_layers(feature_shape: tuple[int, ...], head: InternalClassifier, out: int,
                activation: str) -> tuple[LayerSpec, ...]:
    act = ActivationSpec(activation)
    if len(feature_shape) == 3:
        return (LayerSpec("conv", head.hidden, 3, 1, True, act), LayerSpec("gap"),
                LayerSpec("dense", out))
    return (LayerSpec("dense", head.hidden, batchnorm=True, activation=act), LayerSpec("dense", out))
