"""DRAM geometry and physical-address <-> cell-coordinate mapping.

A physical address is split, from the bottom up, into a block offset
(the bytes of one burst in one channel) followed by the level fields of
an :class:`AddressScheme`.  Optional XOR functions fold low address bits
into a level's field, which is how bank/channel interleaving is modelled.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import kernels

#: level order used by ``CellCoord`` and by the kernel layout arrays
COORD_LEVELS = ("row", "column", "channel", "rank", "bank")
#: default bottom-up order of the address fields
DEFAULT_FIELD_ORDER = ("column", "bank", "channel", "rank", "row")
SCHEME_IDS = ("S1", "S2", "S3")


class DramError(ValueError):
    """Invalid DRAM configuration or scheme."""


class AddressBoundsError(IndexError):
    """Address or coordinate outside the device."""


def _log2(n: int) -> int:
    return int(n).bit_length() - 1


def _is_pow2(n: int) -> bool:
    return isinstance(n, (int, np.integer)) and n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class DramConfig:
    """Device geometry.

    ``columns`` counts device columns of ``dq_width`` bits.  The address
    decoder works in burst-sized column slots of
    ``burst_length * channel_width`` bits, so a row of one bank holds
    :attr:`column_slots` addressable slots.
    """

    channels: int
    ranks: int
    banks: int
    rows: int
    columns: int
    dq_width: int
    channel_width: int
    burst_length: int
    page_size: int = 4096
    name: str = "custom"

    def __post_init__(self):
        for attr in ("channels", "ranks", "banks", "rows", "columns",
                     "dq_width", "channel_width", "burst_length", "page_size"):
            value = getattr(self, attr)
            if not _is_pow2(value):
                raise DramError(f"{attr} must be a power of two >= 1, got {value!r}")
        if self.block_bits % 8:
            raise DramError("burst_length * channel_width must be a whole number of bytes")
        if (self.columns * self.dq_width) % self.block_bits:
            raise DramError("a row must hold a whole number of burst blocks")

    @property
    def block_bits(self) -> int:
        return self.burst_length * self.channel_width

    @property
    def block_bytes(self) -> int:
        return self.block_bits // 8

    @property
    def offset_bits(self) -> int:
        """Lowest address bit used for addressing (4 for BL16 x 8-bit)."""
        return _log2(self.block_bytes)

    @property
    def column_slots(self) -> int:
        return self.columns * self.dq_width // self.block_bits

    def level_count(self, level: str) -> int:
        if level == "column":
            return self.column_slots
        return {"row": self.rows, "channel": self.channels,
                "rank": self.ranks, "bank": self.banks}[level]

    @property
    def capacity_bytes(self) -> int:
        return capacity(self) // 8

    @classmethod
    def from_dict(cls, data: dict) -> "DramConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(data) - known
        if extra:
            raise DramError(f"unknown DRAM standard keys: {sorted(extra)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise DramError(str(exc)) from None

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def capacity(cfg: DramConfig) -> int:
    """Device capacity in bits."""
    return (cfg.channels * cfg.ranks * cfg.banks * cfg.rows
            * cfg.columns * cfg.dq_width)


# 8 GB, 128-bit LPDDR4-class device used for campaigns.  Field layout under
# S1 puts column at a4..a10, bank a11..a13, channel a14..a16, rank a17 and
# row from a18 up.
LPDDR4_8GB = DramConfig(
    channels=8, ranks=2, banks=8, rows=1 << 15, columns=1 << 10,
    dq_width=16, channel_width=8, burst_length=16, name="lpddr4-8gb",
)

# Scaled-down device (2 MiB) small enough for exhaustive sweeps.
SCALED = DramConfig(
    channels=2, ranks=1, banks=4, rows=1 << 7, columns=1 << 7,
    dq_width=128, channel_width=8, burst_length=16, name="scaled",
)

# Campaign device for kilobyte-sized images: a 1 KiB row stride keeps the
# row-to-image size ratio in the range a full-size model sees on LPDDR4.
TOY = DramConfig(
    channels=2, ranks=1, banks=4, rows=1 << 10, columns=1 << 6,
    dq_width=16, channel_width=8, burst_length=16, name="toy",
)


@dataclass(frozen=True)
class FieldRange:
    level: str
    lo: int
    hi: int  # inclusive

    @property
    def width(self) -> int:
        return self.hi - self.lo + 1


@dataclass(frozen=True)
class XorFunction:
    """``target`` field bits ``dst_lo..`` are XORed with address bits ``src_lo..``."""

    target: str
    src_lo: int
    dst_lo: int
    width: int

    @property
    def src_bits(self) -> range:
        return range(self.src_lo, self.src_lo + self.width)

    @property
    def dst_bits(self) -> range:
        return range(self.dst_lo, self.dst_lo + self.width)


@dataclass(frozen=True)
class AddressScheme:
    scheme_id: str
    fields: tuple[FieldRange, ...]
    xor_functions: tuple[XorFunction, ...] = ()
    _layout: np.ndarray = field(default=None, repr=False, compare=False)
    _xors: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        layout = np.zeros((5, 2), dtype=np.int64)
        by_level = {f.level: f for f in self.fields}
        for j, level in enumerate(COORD_LEVELS):
            f = by_level.get(level)
            if f is not None:
                layout[j] = (f.lo, f.width)
        xors = np.array([(x.src_lo, x.dst_lo, x.width) for x in self.xor_functions],
                        dtype=np.int64).reshape(-1, 3)
        object.__setattr__(self, "_layout", layout)
        object.__setattr__(self, "_xors", xors)

    def field_of(self, level: str) -> FieldRange | None:
        for f in self.fields:
            if f.level == level:
                return f
        return None

    def validate(self, cfg: DramConfig) -> None:
        """Raise :class:`DramError` unless the layout exactly tiles the address."""
        seen: set[int] = set()
        levels = [f.level for f in self.fields]
        if len(set(levels)) != len(levels):
            raise DramError("a level appears twice in the field layout")
        for f in self.fields:
            if f.level not in COORD_LEVELS:
                raise DramError(f"unknown level {f.level!r}")
            if f.hi < f.lo:
                raise DramError(f"empty bit range for {f.level}")
            bits = set(range(f.lo, f.hi + 1))
            if bits & seen:
                raise DramError(f"bit range of {f.level} overlaps another field")
            seen |= bits
            if 1 << f.width != cfg.level_count(f.level):
                raise DramError(
                    f"{f.level} field is {f.width} bits but the device has "
                    f"{cfg.level_count(f.level)} {f.level}s")
        for level in COORD_LEVELS:
            if self.field_of(level) is None and cfg.level_count(level) != 1:
                raise DramError(f"no address bits for {level}")
        total = _log2(cfg.capacity_bytes)
        if seen != set(range(cfg.offset_bits, total)):
            raise DramError(
                f"fields must cover exactly a{cfg.offset_bits}..a{total - 1}")
        dst_all: set[int] = set()
        for x in self.xor_functions:
            target = self.field_of(x.target)
            if target is None or not set(x.dst_bits) <= set(range(target.lo, target.hi + 1)):
                raise DramError(f"XOR destination outside the {x.target} field")
            dst_all |= set(x.dst_bits)
        for x in self.xor_functions:
            if set(x.src_bits) & dst_all:
                raise DramError("XOR source bits overlap an XOR destination")
            if not set(x.src_bits) <= seen:
                raise DramError("XOR source bits outside the addressable range")

    def to_dict(self) -> dict:
        return {
            "scheme": self.scheme_id,
            "fields": [{"level": f.level, "lo": f.lo, "hi": f.hi} for f in self.fields],
            "xor": [{"target": x.target, "src_lo": x.src_lo, "dst_lo": x.dst_lo,
                     "width": x.width} for x in self.xor_functions],
        }


def make_scheme(cfg: DramConfig, scheme_id: str) -> AddressScheme:
    """Build the documented S1/S2/S3 layout for ``cfg``.

    S1 stacks column, bank, channel, rank, row above the block offset.
    S2 XORs the bank field with the lowest column bits, S3 does the same
    for the channel field.
    """
    scheme_id = scheme_id.upper()
    if scheme_id not in SCHEME_IDS:
        raise DramError(f"unknown scheme {scheme_id!r}; expected one of {SCHEME_IDS}")
    fields = []
    lo = cfg.offset_bits
    for level in DEFAULT_FIELD_ORDER:
        width = _log2(cfg.level_count(level))
        if width:
            fields.append(FieldRange(level, lo, lo + width - 1))
            lo += width
    scheme = AddressScheme("S1", tuple(fields))
    target = {"S1": None, "S2": "bank", "S3": "channel"}[scheme_id]
    xors: tuple[XorFunction, ...] = ()
    if target is not None:
        tf, col = scheme.field_of(target), scheme.field_of("column")
        if tf is None or col is None:
            raise DramError(f"{scheme_id} needs both a {target} and a column field")
        width = min(tf.width, col.width)
        xors = (XorFunction(target, col.lo, tf.lo, width),)
    scheme = AddressScheme(scheme_id, tuple(fields), xors)
    scheme.validate(cfg)
    return scheme


def scheme_from_dict(data: dict, cfg: DramConfig) -> AddressScheme:
    """Parse a ``dram_mapping.json`` document.

    ``{"scheme": "S2"}`` selects a documented layout; explicit ``fields``
    (and optional ``xor``) override it.
    """
    if "scheme" not in data:
        raise DramError("dram mapping needs a 'scheme' key")
    if "fields" not in data:
        return make_scheme(cfg, data["scheme"])
    try:
        fields = tuple(FieldRange(f["level"], int(f["lo"]), int(f["hi"])) for f in data["fields"])
        xors = tuple(XorFunction(x["target"], int(x["src_lo"]), int(x["dst_lo"]), int(x["width"]))
                     for x in data.get("xor", []))
    except (KeyError, TypeError) as exc:
        raise DramError(f"malformed dram mapping: {exc}") from None
    scheme = AddressScheme(str(data["scheme"]), fields, xors)
    scheme.validate(cfg)
    return scheme


def load_dram_standard(path: str | Path) -> DramConfig:
    return DramConfig.from_dict(json.loads(Path(path).read_text()))


def load_dram_mapping(path: str | Path, cfg: DramConfig) -> AddressScheme:
    return scheme_from_dict(json.loads(Path(path).read_text()), cfg)


class CellCoord(NamedTuple):
    row: int
    column: int
    channel: int
    rank: int
    bank: int
    bit_in_block: int = 0

    @property
    def bit_in_byte(self) -> int:
        return self.bit_in_block % 8


def _check_pa(pa: np.ndarray, cfg: DramConfig) -> None:
    if pa.size and (pa.min() < 0 or pa.max() >= cfg.capacity_bytes):
        raise AddressBoundsError(
            f"physical address outside [0, {cfg.capacity_bytes:#x})")


def _check_coords(coords: np.ndarray, cfg: DramConfig) -> None:
    limits = np.array([cfg.rows, cfg.column_slots, cfg.channels, cfg.ranks,
                       cfg.banks, cfg.block_bits], dtype=np.int64)
    if coords.size and ((coords < 0).any() or (coords >= limits).any()):
        raise AddressBoundsError("cell coordinate outside the device")


def decode_many(pa, cfg: DramConfig, scheme: AddressScheme, bit=None) -> np.ndarray:
    """Vectorised decode; returns an ``(n, 6)`` array in ``CellCoord`` field order."""
    pa = np.asarray(pa, dtype=np.int64).reshape(-1)
    _check_pa(pa, cfg)
    if bit is None:
        bit = np.zeros(pa.shape, dtype=np.int64)
    else:
        bit = np.ascontiguousarray(np.broadcast_to(np.asarray(bit, dtype=np.int64), pa.shape))
    return kernels.decode_batch(np.ascontiguousarray(pa.astype(np.uint64)), bit,
                                scheme._layout, scheme._xors, cfg.offset_bits)


def encode_many(coords, cfg: DramConfig, scheme: AddressScheme) -> np.ndarray:
    """Vectorised inverse of :func:`decode_many`; returns int64 byte addresses."""
    coords = np.ascontiguousarray(np.asarray(coords, dtype=np.int64).reshape(-1, 6))
    _check_coords(coords, cfg)
    return kernels.encode_batch(coords, scheme._layout, scheme._xors).astype(np.int64)


def decode_address(pa: int, cfg: DramConfig, scheme: AddressScheme, bit: int = 0) -> CellCoord:
    """Cell holding bit ``bit`` of the byte at physical address ``pa``.

    ``bit_in_block`` is ``8 * (pa mod block_bytes) + bit``.
    """
    if not 0 <= bit < 8:
        raise AddressBoundsError("bit must be in 0..7")
    if not 0 <= pa < cfg.capacity_bytes:
        raise AddressBoundsError(f"physical address {pa:#x} outside the device")
    row = decode_many([pa], cfg, scheme, [bit])[0]
    return CellCoord(*(int(v) for v in row))


def encode_cell(cell: CellCoord, cfg: DramConfig, scheme: AddressScheme) -> int:
    """Byte address holding ``cell``; the bit inside that byte is ``cell.bit_in_byte``."""
    return int(encode_many([tuple(cell)], cfg, scheme)[0])


@dataclass(frozen=True)
class LevelSpan:
    """Inclusive index range per level."""

    row: tuple[int, int]
    column: tuple[int, int]
    channel: tuple[int, int]
    rank: tuple[int, int]
    bank: tuple[int, int]

    def count(self, level: str) -> int:
        lo, hi = getattr(self, level)
        return hi - lo + 1

    def contains(self, cell: CellCoord) -> bool:
        return all(getattr(self, lv)[0] <= getattr(cell, lv) <= getattr(self, lv)[1]
                   for lv in COORD_LEVELS)


def _bits_range(a: int, b: int, lo: int, width: int) -> tuple[int, int, bool]:
    """Min/max of address bits ``lo..lo+width-1`` over ``[a, b]``; flag if constant."""
    if width == 0:
        return 0, 0, True
    top = (1 << width) - 1
    A, B = a >> lo, b >> lo
    if B - A >= top:
        return 0, top, False
    va, vb = A & top, B & top
    if va <= vb:
        return va, vb, va == vb
    return 0, top, False


def level_span(pa_min: int, pa_max: int, cfg: DramConfig, scheme: AddressScheme) -> LevelSpan:
    """Per-level index ranges reachable from addresses in ``[pa_min, pa_max]``.

    Plain fields get the exact min/max.  XOR-targeted fields are bounded by
    enumerating every (raw, source) value pair, which is sound and tight
    whenever the pair count is small; otherwise the full range is used.
    """
    if pa_min > pa_max:
        raise ValueError("pa_min must not exceed pa_max")
    if pa_min < 0 or pa_max >= cfg.capacity_bytes:
        raise AddressBoundsError("span outside the device")
    spans = {}
    for level in COORD_LEVELS:
        f = scheme.field_of(level)
        if f is None:
            spans[level] = (0, 0)
            continue
        lo, hi, _ = _bits_range(pa_min, pa_max, f.lo, f.width)
        xs = [x for x in scheme.xor_functions if x.target == level]
        if xs:
            raw_vals = range(lo, hi + 1)
            masks = [0]
            for x in xs:
                slo, shi, _ = _bits_range(pa_min, pa_max, x.src_lo, x.width)
                shift = x.dst_lo - f.lo
                masks = [m ^ (s << shift) for m in masks for s in range(slo, shi + 1)]
            if len(raw_vals) * len(masks) <= 1 << 16:
                vals = [r ^ m for r in raw_vals for m in masks]
                lo, hi = min(vals), max(vals)
            else:
                lo, hi = 0, (1 << f.width) - 1
        spans[level] = (lo, hi)
    return LevelSpan(**spans)


def full_span(cfg: DramConfig) -> LevelSpan:
    return LevelSpan(row=(0, cfg.rows - 1), column=(0, cfg.column_slots - 1),
                     channel=(0, cfg.channels - 1), rank=(0, cfg.ranks - 1),
                     bank=(0, cfg.banks - 1))
