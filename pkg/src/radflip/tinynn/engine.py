"""Byte-exact engine image.

Layout (little-endian)::

    header   32 B   magic "RDNT", version u16, layer count u16, task u8, pad u8,
                    num_classes u16, input C/H/W u32 x3, grid u16, 6 reserved
    table    68 B per layer
                    kind u8, activation u8, group u8, pad u8, dims u32 x4,
                    theta f32, weight scale f32, weight zero point i32,
                    bias scale f32, weight offset u64, weight length u64,
                    bias offset u64, bias length u64
    blobs    per layer: int8 weights followed by int32 biases

Structural fields are validated on load.  Numeric fields (theta, scale,
zero point, blob contents) are taken verbatim so corrupted values reach
inference silently.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import ACT_CODES, KIND_CODES, TASK_CODES, QLayer, QuantizedModel, shape_after
from .spec import SpecError

MAGIC = b"RDNT"
VERSION = 1
HEADER = struct.Struct("<4sHHBBHIIIH6x")
RECORD = struct.Struct("<BBBx4IffifQQQQ")
assert HEADER.size == 32 and RECORD.size == 68
MAX_LAYERS = 4096
MAX_DIM = 1 << 24

_KIND_NAMES = {v: k for k, v in KIND_CODES.items()}
_ACT_NAMES = {v: k for k, v in ACT_CODES.items()}
_TASK_NAMES = {v: k for k, v in TASK_CODES.items()}


class EngineFormatError(ValueError):
    """The image's header or layer table is not structurally valid."""


@dataclass(frozen=True)
class LayoutEntry:
    start: int
    end: int
    part: str  # header | record | weight | bias | pad (gap between blobs)
    layer: int = -1
    group: int = -1

    @property
    def size(self) -> int:
        return self.end - self.start


class EngineImage:
    """Serialized model bytes plus the byte range of every component."""

    def __init__(self, data: bytes | bytearray, layout: tuple[LayoutEntry, ...] | None = None):
        self.data = bytearray(data)
        self.layout = layout if layout is not None else layout_of(bytes(self.data))

    def __len__(self) -> int:
        return len(self.data)

    @property
    def buffer(self) -> np.ndarray:
        """Writable uint8 view sharing memory with the image."""
        return np.frombuffer(self.data, dtype=np.uint8)

    def sha256(self) -> str:
        return hashlib.sha256(self.data).hexdigest()

    def copy(self) -> "EngineImage":
        return EngineImage(bytes(self.data), self.layout)

    def entries(self, part: str | None = None, layer: int | None = None,
                group: int | None = None) -> list[LayoutEntry]:
        return [e for e in self.layout
                if (part is None or e.part == part) and (layer is None or e.layer == layer)
                and (group is None or e.group == group)]

    @property
    def parameter_range(self) -> tuple[int, int]:
        """``[start, end)`` of the blob section: everything after the layer table."""
        blobs = [e for e in self.layout if e.part in ("weight", "bias", "pad")]
        if not blobs:
            return len(self.data), len(self.data)
        return blobs[0].start, blobs[-1].end

    def locate(self, offset: int) -> LayoutEntry:
        starts = [e.start for e in self.layout]
        i = int(np.searchsorted(starts, offset, side="right")) - 1
        if i < 0 or offset >= self.layout[i].end:
            raise IndexError(f"offset {offset} outside the image")
        return self.layout[i]

    def owner_array(self) -> np.ndarray:
        """Layer index owning every byte (-1 for header bytes)."""
        out = np.full(len(self.data), -1, dtype=np.int64)
        for e in self.layout:
            out[e.start:e.end] = e.layer
        return out

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(bytes(self.data))

    @classmethod
    def load(cls, path: str | Path) -> "EngineImage":
        return cls(Path(path).read_bytes())


def serialize(model: QuantizedModel) -> EngineImage:
    n = len(model.layers)
    if not 1 <= n <= MAX_LAYERS:
        raise EngineFormatError(f"layer count {n} outside [1, {MAX_LAYERS}]")
    c, h, w = model.input_shape
    header = HEADER.pack(MAGIC, VERSION, n, TASK_CODES[model.task], 0, model.num_classes,
                         c, h, w, model.grid)
    layout = [LayoutEntry(0, HEADER.size, "header")]
    table_end = HEADER.size + RECORD.size * n
    cursor = table_end
    table, payload, blobs = [], [], []
    for i, l in enumerate(model.layers):
        wb = np.asarray(l.weight, dtype=np.int8).tobytes()
        bb = np.asarray(l.bias, dtype="<i4").tobytes()
        w_off = cursor if wb else 0
        b_off = cursor + len(wb) if bb else 0
        table.append(RECORD.pack(KIND_CODES[l.kind], ACT_CODES[l.activation], l.group,
                                 *map(int, l.dims), np.float32(l.theta), np.float32(l.scale),
                                 int(l.zero_point), np.float32(l.bias_scale),
                                 w_off, len(wb), b_off, len(bb)))
        layout.append(LayoutEntry(HEADER.size + RECORD.size * i,
                                  HEADER.size + RECORD.size * (i + 1), "record", i, l.group))
        if wb:
            blobs.append(LayoutEntry(cursor, cursor + len(wb), "weight", i, l.group))
        if bb:
            blobs.append(LayoutEntry(b_off, b_off + len(bb), "bias", i, l.group))
        payload.append(wb + bb)
        cursor += len(payload[-1])
    data = bytearray(header) + b"".join(table) + b"".join(payload)
    return EngineImage(data, tuple(layout + blobs))


def _parse(data: bytes):
    if len(data) < HEADER.size:
        raise EngineFormatError("image shorter than its header")
    magic, version, n, task, _, num_classes, c, h, w, grid = HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise EngineFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise EngineFormatError(f"unsupported version {version}")
    if not 1 <= n <= MAX_LAYERS:
        raise EngineFormatError(f"layer count {n} outside [1, {MAX_LAYERS}]")
    table_end = HEADER.size + RECORD.size * n
    if table_end > len(data):
        raise EngineFormatError("layer table runs past the end of the image")
    if task not in _TASK_NAMES:
        raise EngineFormatError(f"unknown task code {task}")
    if num_classes < 1 or not all(1 <= d <= MAX_DIM for d in (c, h, w)):
        raise EngineFormatError("invalid class count or input shape")
    task_name = _TASK_NAMES[task]
    if task_name == "detection" and grid < 1:
        raise EngineFormatError("detection image without a grid")
    recs = [RECORD.unpack_from(data, HEADER.size + RECORD.size * i) for i in range(n)]
    return task_name, num_classes, (c, h, w), grid, table_end, recs


def _check_blob(off: int, length: int, expected: int, table_end: int, size: int, what: str):
    if length != expected:
        raise EngineFormatError(f"{what} blob holds {length} bytes, expected {expected}")
    if length and not (table_end <= off and off + length <= size):
        raise EngineFormatError(f"{what} blob [{off}, {off + length}) outside the blob section")


def deserialize(data: bytes | bytearray | EngineImage) -> QuantizedModel:
    if isinstance(data, EngineImage):
        data = data.data
    data = bytes(data)
    task, num_classes, in_shape, grid, table_end, recs = _parse(data)
    expected_out = num_classes if task == "classification" else grid * grid * (5 + num_classes)
    layers: list[QLayer] = []
    n_backbone = sum(1 for r in recs if r[2] == 0)
    shapes = {0: tuple(in_shape)}
    shape = tuple(in_shape)
    prev_group = 0
    for i, r in enumerate(recs):
        (kind_c, act_c, group, d0, d1, d2, d3, theta, scale, zp, bias_scale,
         w_off, w_len, b_off, b_len) = r
        where = f"layer {i}"
        if kind_c not in _KIND_NAMES:
            raise EngineFormatError(f"{where}: unknown kind code {kind_c}")
        if act_c not in _ACT_NAMES:
            raise EngineFormatError(f"{where}: unknown activation code {act_c}")
        if group < prev_group or (group and group > n_backbone - 1):
            raise EngineFormatError(f"{where}: invalid exit group {group}")
        if group != prev_group:
            if group in shapes and group != 0:
                shape = shapes[group]
            else:
                raise EngineFormatError(f"{where}: head attached to an unknown layer")
        kind, dims = _KIND_NAMES[kind_c], (d0, d1, d2, d3)
        if kind == "dense":
            fan_in = int(np.prod(shape))
            if d0 != fan_in or not 1 <= d1 <= MAX_DIM or (d2, d3) != (1, 1):
                raise EngineFormatError(f"{where}: dense dims {dims} do not fit input {shape}")
            n_w = d0 * d1
        elif kind == "conv":
            if len(shape) != 3 or d0 != shape[0] or not 1 <= d1 <= MAX_DIM \
                    or not 1 <= d2 <= 64 or not 1 <= d3 <= 64:
                raise EngineFormatError(f"{where}: conv dims {dims} do not fit input {shape}")
            n_w = d0 * d1 * d2 * d2
        else:
            ok = (d0, d1) == (0, 0) and (
                (kind == "gap" and (d2, d3) == (0, 0)) or (kind != "gap" and 1 <= d2 <= 64 and 1 <= d3 <= 64))
            if not ok or len(shape) != 3:
                raise EngineFormatError(f"{where}: {kind} dims {dims} do not fit input {shape}")
            n_w = 0
        has_b = kind in ("dense", "conv")
        _check_blob(w_off, w_len, n_w, table_end, len(data), f"{where} weight")
        _check_blob(b_off, b_len, 4 * d1 if has_b else 0, table_end, len(data), f"{where} bias")
        try:
            shape = shape_after(shape, kind, dims)
        except SpecError as exc:
            raise EngineFormatError(f"{where}: {exc}") from None
        if group == 0:
            shapes[len(shapes)] = shape
        weight = np.frombuffer(data, np.int8, w_len, w_off).copy() if w_len else np.zeros(0, np.int8)
        bias = (np.frombuffer(data, "<i4", b_len // 4, b_off).astype(np.int32) if b_len
                else np.zeros(0, np.int32))
        layers.append(QLayer(kind, _ACT_NAMES[act_c], group, dims, float(theta), float(scale),
                             int(zp), weight, bias, float(bias_scale)))
        last_of_group = i + 1 == len(recs) or recs[i + 1][2] != group
        if last_of_group and int(np.prod(shape)) != expected_out and (group or i + 1 == n_backbone):
            raise EngineFormatError(f"{where}: output of {shape} does not match the task")
        prev_group = group
    if n_backbone == 0:
        raise EngineFormatError("image has no backbone layers")
    return QuantizedModel(task, tuple(in_shape), num_classes, layers, grid)


def layout_of(data: bytes) -> tuple[LayoutEntry, ...]:
    """Rebuild the layout index of a valid image."""
    _, _, _, _, table_end, recs = _parse(data)
    entries = [LayoutEntry(0, HEADER.size, "header")]
    blobs = []
    for i, r in enumerate(recs):
        entries.append(LayoutEntry(HEADER.size + RECORD.size * i,
                                   HEADER.size + RECORD.size * (i + 1), "record", i, r[2]))
        w_off, w_len, b_off, b_len = r[-4:]
        if w_len:
            blobs.append(LayoutEntry(w_off, w_off + w_len, "weight", i, r[2]))
        if b_len:
            start = w_off + w_len if w_len else b_off
            if b_off > start:
                blobs.append(LayoutEntry(start, b_off, "pad", i, r[2]))
            blobs.append(LayoutEntry(b_off, b_off + b_len, "bias", i, r[2]))
    return tuple(entries + sorted(blobs, key=lambda e: e.start))


def image_size(model: QuantizedModel) -> int:
    return len(serialize(model))
