"""End-to-end bit-flip injection into a buffer that backs a ROI.

Planning follows the emulator pipeline: pick a reference cell inside the
DRAM span of the target's physical blocks, grow a cluster around it, map
every cell back to a physical then virtual address, and redraw the whole
event until all of its cells land in the target range.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import kernels
from .addrspace import BlockMap, Roi
from .dram import (COORD_LEVELS, AddressScheme, CellCoord, DramConfig, decode_many,
                   encode_many, level_span)
from .radiation import (ErrorModelConfig, FlipCluster, compose_event_mix, grow_offsets,
                        sample_multiplicities)

DEFAULT_MAX_ATTEMPTS = 10_000
_MAX_BATCH_CANDIDATES = 1 << 17


class PlanningError(RuntimeError):
    def __init__(self, message: str, achieved_bits: int = 0, total_bits: int = 0):
        super().__init__(message)
        self.achieved_bits = achieved_bits
        self.total_bits = total_bits

    @property
    def achievable_fraction(self) -> float:
        return self.achieved_bits / self.total_bits if self.total_bits else 0.0


@dataclass(frozen=True)
class PlannedEvent:
    cluster: FlipCluster | None
    physical: tuple[int, ...]
    virtual: tuple[int, ...]
    bits: tuple[int, ...]


@dataclass(frozen=True)
class InjectionPlan:
    events: tuple[PlannedEvent, ...]
    total_bits: int
    seed: int | None
    roi: Roi
    attempts: int = 0

    def flips(self) -> tuple[np.ndarray, np.ndarray]:
        """``(byte offsets relative to the ROI start, bit-in-byte)`` for every flip."""
        if not self.events:
            return np.zeros(0, np.int64), np.zeros(0, np.int64)
        va = np.fromiter((v for e in self.events for v in e.virtual), dtype=np.int64)
        bit = np.fromiter((b for e in self.events for b in e.bits), dtype=np.int64)
        return va - self.roi.start, bit

    def to_dict(self) -> dict:
        def cell(c):
            return list(c) if c is not None else None

        return {
            "roi": {"start": self.roi.start, "size": self.roi.size},
            "total_bits": self.total_bits,
            "seed": self.seed,
            "attempts": self.attempts,
            "events": [
                {
                    "reference": cell(e.cluster.reference) if e.cluster else None,
                    "cells": [cell(c) for c in e.cluster.cells] if e.cluster else None,
                    "physical": list(e.physical),
                    "virtual": list(e.virtual),
                    "bits": list(e.bits),
                }
                for e in self.events
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "InjectionPlan":
        events = []
        for e in data["events"]:
            cluster = None
            if e.get("cells") is not None:
                cluster = FlipCluster(tuple(CellCoord(*c) for c in e["cells"]),
                                      CellCoord(*e["reference"]))
            events.append(PlannedEvent(cluster, tuple(e["physical"]), tuple(e["virtual"]),
                                       tuple(e["bits"])))
        return cls(tuple(events), int(data["total_bits"]), data.get("seed"),
                   Roi(data["roi"]["start"], data["roi"]["size"]), int(data.get("attempts", 0)))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


@dataclass(frozen=True)
class InjectionRecord:
    plan: InjectionPlan
    pre_flip_bits: np.ndarray = field(repr=False)


def _target_range(roi: Roi, target) -> tuple[int, int]:
    t0, t1 = (roi.start, roi.end) if target is None else (int(target[0]), int(target[1]))
    if not roi.start <= t0 < t1 <= roi.end:
        raise ValueError("target range must be a non-empty part of the ROI")
    return t0, t1


def _draw_references(span, cfg: DramConfig, rng: np.random.Generator, m: int) -> np.ndarray:
    refs = np.empty((m, 6), dtype=np.int64)
    for j, level in enumerate(COORD_LEVELS):
        lo, hi = getattr(span, level)
        refs[:, j] = rng.integers(lo, hi + 1, size=m)
    refs[:, 5] = rng.integers(0, cfg.block_bits, size=m)
    return refs


def _cluster_coords(refs: np.ndarray, offs: np.ndarray, sizes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Expand references + offsets to ``(m, box, 6)`` coords and a used-cell mask."""
    used = np.arange(offs.shape[1])[None, :] < sizes[:, None]
    d = np.where(used[..., None], offs, 0)
    coords = np.repeat(refs[:, None, :], offs.shape[1], axis=1)
    coords[..., 0] += d[..., 0]
    coords[..., 1] += d[..., 1]
    return coords, used


def plan_injection(roi: Roi, block_map: BlockMap, cfg: DramConfig, scheme: AddressScheme,
                   model: ErrorModelConfig, total_bits: int, rng: np.random.Generator, *,
                   target: Sequence[int] | None = None, seed: int | None = None,
                   max_attempts: int = DEFAULT_MAX_ATTEMPTS) -> InjectionPlan:
    """Plan exactly ``total_bits`` distinct flips whose virtual addresses lie in ``target``.

    ``target`` is a virtual ``[start, end)`` inside the ROI (default: the
    whole ROI).  Events that miss the target or collide with an accepted
    bit are redrawn as a whole, keeping each cluster's shape intact.
    """
    t0, t1 = _target_range(roi, target)
    pmin, pmax = block_map.physical_extent_of(t0, t1)
    span = level_span(pmin, pmax, cfg, scheme)
    sizes = np.array(compose_event_mix(total_bits, model, rng).cluster_sizes, dtype=np.int64)
    n = sizes.size
    taken = np.zeros((t1 - t0) * 8, dtype=bool)
    accepted: list[PlannedEvent | None] = [None] * n
    attempts = np.zeros(n, dtype=np.int64)
    pending = np.arange(n)
    per_event = 4
    while pending.size:
        per_event = int(min(per_event, max(1, _MAX_BATCH_CANDIDATES // pending.size)))
        ev = np.repeat(pending, per_event)
        m = ev.size
        refs = _draw_references(span, cfg, rng, m)
        ev_sizes = sizes[ev]
        offs, ok = grow_offsets(ev_sizes, model, rng, refs[:, 0], refs[:, 1], cfg)
        coords, used = _cluster_coords(refs, offs, ev_sizes)
        pa = np.full(used.shape, -1, dtype=np.int64)
        cell_ok = used & ok[:, None]
        pa[cell_ok] = encode_many(coords[cell_ok], cfg, scheme)
        va, found = block_map.phys_to_virt_many(pa.ravel())
        va = va.reshape(pa.shape)
        inside = found.reshape(pa.shape) & (va >= t0) & (va < t1)
        cand_ok = (ok & np.all(inside | ~used, axis=1)).reshape(-1, per_event)
        hit_rate = cand_ok.mean()

        still = []
        for pos, e in enumerate(pending):
            s = sizes[e]
            chosen = -1
            # first in-target candidate that does not reuse an accepted bit
            for k in np.flatnonzero(cand_ok[pos]):
                idx = pos * per_event + k
                flat = (va[idx, :s] - t0) * 8 + coords[idx, :s, 5] % 8
                if not taken[flat].any():
                    chosen = k
                    break
            if chosen < 0:
                attempts[e] += per_event
                still.append(e)
                continue
            taken[flat] = True
            attempts[e] += chosen + 1
            v = va[idx, :s]
            bit = coords[idx, :s, 5] % 8
            cells = tuple(CellCoord(*map(int, c)) for c in coords[idx, :s])
            accepted[e] = PlannedEvent(FlipCluster(cells, cells[0]), tuple(map(int, pa[idx, :s])),
                                       tuple(map(int, v)), tuple(map(int, bit)))
        pending = np.array(still, dtype=np.int64)
        if pending.size and attempts[pending].max() >= max_attempts:
            done = int(sum(sizes[i] for i in range(n) if accepted[i] is not None))
            raise PlanningError(
                f"retry budget of {max_attempts} attempts exhausted; only {done}/{total_bits} "
                f"bits ({done / total_bits:.1%}) could be placed in the target range",
                done, total_bits)
        per_event = int(np.clip(np.ceil(2.0 / max(hit_rate, 1e-4)), 4, max_attempts))
    return InjectionPlan(tuple(accepted), total_bits, seed, roi, int(attempts.sum()))


def plan_uniform(roi: Roi, block_map: BlockMap, total_bits: int, rng: np.random.Generator, *,
                 target: Sequence[int] | None = None, seed: int | None = None) -> InjectionPlan:
    """Spatially independent flips drawn uniformly over the target's bits."""
    t0, t1 = _target_range(roi, target)
    n_bits = (t1 - t0) * 8
    if total_bits > n_bits:
        raise PlanningError("more flips requested than bits in the target", n_bits, total_bits)
    picks = np.sort(rng.choice(n_bits, size=total_bits, replace=False))
    va = t0 + picks // 8
    pa = block_map.virt_to_phys_many(va)
    events = tuple(PlannedEvent(None, (int(p),), (int(v),), (int(b),))
                   for p, v, b in zip(pa, va, picks % 8))
    return InjectionPlan(events, total_bits, seed, roi, total_bits)


def _as_array(buffer) -> np.ndarray:
    if isinstance(buffer, np.ndarray):
        if buffer.dtype != np.uint8 or buffer.ndim != 1:
            raise ValueError("buffer must be a 1-D uint8 array")
        return buffer
    return np.frombuffer(buffer, dtype=np.uint8)


def apply_flips(buffer, plan: InjectionPlan) -> InjectionRecord:
    """Invert every planned bit of ``buffer`` in place."""
    buf = _as_array(buffer)
    if buf.size != plan.roi.size:
        raise ValueError(f"buffer holds {buf.size} bytes but the ROI is {plan.roi.size}")
    off, bit = plan.flips()
    pre = (buf[off] >> bit.astype(np.uint8)) & 1
    kernels.flip_bits(buf, np.ascontiguousarray(off), np.ascontiguousarray(bit))
    return InjectionRecord(plan, pre.astype(np.uint8))


def revert(buffer, record: InjectionRecord) -> None:
    """Undo :func:`apply_flips`.  Flipping is an XOR, so a second call re-applies."""
    buf = _as_array(buffer)
    off, bit = record.plan.flips()
    kernels.flip_bits(buf, np.ascontiguousarray(off), np.ascontiguousarray(bit))


def mcu_validity(block_map: BlockMap, region: Sequence[int], cfg: DramConfig,
                 scheme: AddressScheme, model: ErrorModelConfig, trials: int,
                 rng: np.random.Generator) -> float:
    """Fraction of multi-cell events struck inside ``region`` that stay entirely inside it.

    Each trial strikes a uniformly chosen bit of the region, grows a cluster
    of size >= 2 around the DRAM cell holding it, and checks where the
    other cells land in virtual space.
    """
    t0, t1 = int(region[0]), int(region[1])
    mcu = model.conditional(2)
    picks = rng.integers(0, (t1 - t0) * 8, size=trials)
    pa = block_map.virt_to_phys_many(t0 + picks // 8)
    refs = decode_many(pa, cfg, scheme, picks % 8)
    sizes = sample_multiplicities(mcu, rng, trials)
    offs, ok = grow_offsets(sizes, mcu, rng, refs[:, 0], refs[:, 1], cfg)
    coords, used = _cluster_coords(refs, offs, sizes)
    cell_ok = used & ok[:, None]
    cpa = np.full(used.shape, -1, dtype=np.int64)
    cpa[cell_ok] = encode_many(coords[cell_ok], cfg, scheme)
    va, found = block_map.phys_to_virt_many(cpa.ravel())
    va = va.reshape(cpa.shape)
    inside = found.reshape(cpa.shape) & (va >= t0) & (va < t1)
    valid = ok & np.all(inside | ~used, axis=1)
    return float(valid.mean())
