"""Region of interest and its virtual -> physical block map."""
from __future__ import annotations

import ctypes
import mmap
import os
import struct
import sys
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

DEFAULT_PAGE_SIZE = 4096
ADDRESS_BITS = 64


class TranslationError(RuntimeError):
    """A page of the ROI could not be translated."""


@dataclass(frozen=True)
class Roi:
    start: int
    size: int

    def __post_init__(self):
        if self.size <= 0:
            raise ValueError("ROI size must be positive")
        if self.start < 0 or self.start + self.size > 1 << ADDRESS_BITS:
            raise ValueError("ROI does not fit the address width")

    @property
    def end(self) -> int:
        return self.start + self.size

    def contains(self, va) -> np.ndarray | bool:
        return (va >= self.start) & (va < self.end)


@dataclass(frozen=True)
class BlockPair:
    virtual_base: int
    physical_base: int
    length: int


class BlockMap:
    """Ordered, non-overlapping virtual blocks and their physical bases."""

    def __init__(self, pairs: Sequence[BlockPair], page_size: int = DEFAULT_PAGE_SIZE):
        self.pairs = tuple(pairs)
        self.page_size = page_size
        if not self.pairs:
            raise ValueError("empty block map")
        self._v = np.array([p.virtual_base for p in self.pairs], dtype=np.int64)
        self._p = np.array([p.physical_base for p in self.pairs], dtype=np.int64)
        self._n = np.array([p.length for p in self.pairs], dtype=np.int64)
        if (self._n <= 0).any():
            raise ValueError("block lengths must be positive")
        if (self._v[1:] != self._v[:-1] + self._n[:-1]).any():
            raise ValueError("virtual blocks must be contiguous and ordered")
        order = np.argsort(self._p, kind="stable")
        self._p_sorted = self._p[order]
        self._p_order = order
        ends = self._p_sorted + self._n[order]
        if (ends[:-1] > self._p_sorted[1:]).any():
            raise ValueError("physical blocks overlap")

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    @property
    def roi(self) -> Roi:
        return Roi(int(self._v[0]), int(self._n.sum()))

    @property
    def physical_extent(self) -> tuple[int, int]:
        """Lowest and highest physical byte address of the map."""
        return int(self._p.min()), int((self._p + self._n - 1).max())

    def physical_extent_of(self, va_lo: int, va_hi: int) -> tuple[int, int]:
        """Physical extremes of the blocks backing virtual ``[va_lo, va_hi)``."""
        i0 = int(np.searchsorted(self._v, va_lo, side="right") - 1)
        i1 = int(np.searchsorted(self._v, va_hi - 1, side="right") - 1)
        lo_parts, hi_parts = [], []
        for i in range(max(i0, 0), i1 + 1):
            a = max(va_lo, int(self._v[i]))
            b = min(va_hi, int(self._v[i] + self._n[i]))
            lo_parts.append(int(self._p[i]) + a - int(self._v[i]))
            hi_parts.append(int(self._p[i]) + b - 1 - int(self._v[i]))
        return min(lo_parts), max(hi_parts)

    def virt_to_phys_many(self, va) -> np.ndarray:
        va = np.asarray(va, dtype=np.int64)
        roi = self.roi
        if va.size and ((va < roi.start) | (va >= roi.end)).any():
            raise IndexError("virtual address outside the ROI")
        i = np.searchsorted(self._v, va, side="right") - 1
        return self._p[i] + (va - self._v[i])

    def phys_to_virt_many(self, pa) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(va, found)``; ``va`` is -1 where ``found`` is False."""
        pa = np.asarray(pa, dtype=np.int64)
        j = np.searchsorted(self._p_sorted, pa, side="right") - 1
        jj = np.clip(j, 0, len(self._p_sorted) - 1)
        blk = self._p_order[jj]
        found = (j >= 0) & (pa < self._p[blk] + self._n[blk])
        va = np.where(found, self._v[blk] + (pa - self._p[blk]), -1)
        return va, found

    def to_dict(self) -> dict:
        return {"page_size": self.page_size,
                "pairs": [[p.virtual_base, p.physical_base, p.length] for p in self.pairs]}

    @classmethod
    def from_dict(cls, data: dict) -> "BlockMap":
        return cls([BlockPair(*map(int, p)) for p in data["pairs"]], int(data["page_size"]))


def virt_to_phys(va: int, block_map: BlockMap) -> int:
    return int(block_map.virt_to_phys_many([va])[0])


def phys_to_virt(pa: int, block_map: BlockMap) -> int | None:
    va, found = block_map.phys_to_virt_many([pa])
    return int(va[0]) if found[0] else None


class PageMapProvider(Protocol):
    page_size: int

    def frames(self, roi: Roi) -> list[int]:
        """Physical base address of every virtual page overlapping ``roi``."""


@dataclass(frozen=True)
class SyntheticAllocatorConfig:
    fragmentation_prob: float = 1.0
    physical_space: int = 4 << 20
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.fragmentation_prob <= 1.0:
            raise ValueError("fragmentation_prob must be in [0, 1]")
        if self.physical_space <= 0:
            raise ValueError("physical_space must be positive")


class SyntheticAllocator:
    """Deterministic stand-in for a fragmenting kernel page allocator.

    The first frame is uniform over free frames.  Each later frame is the
    physical successor of the previous one with probability
    ``1 - fragmentation_prob`` (when free); otherwise it is drawn uniformly
    from free frames not adjacent to any frame already handed out.
    """

    def __init__(self, config: SyntheticAllocatorConfig, page_size: int = DEFAULT_PAGE_SIZE):
        self.config = config
        self.page_size = page_size

    def frames(self, roi: Roi) -> list[int]:
        first = roi.start // self.page_size
        last = (roi.end - 1) // self.page_size
        n_pages = last - first + 1
        n_frames = self.config.physical_space // self.page_size
        if n_pages > n_frames:
            raise TranslationError(
                f"ROI needs {n_pages} pages but physical space holds {n_frames}")
        rng = np.random.Generator(np.random.PCG64(self.config.rng_seed))
        used = np.zeros(n_frames + 2, dtype=bool)  # padded so f-1/f+1 never index out
        frames: list[int] = []

        def pick(exclude_adjacent: bool) -> int:
            free = ~used[1:-1]
            if exclude_adjacent:
                isolated = free & ~used[:-2] & ~used[2:]
                if isolated.any():
                    free = isolated
            cands = np.flatnonzero(free)
            if not cands.size:
                raise TranslationError("synthetic physical space exhausted")
            return int(cands[rng.integers(cands.size)])

        for k in range(n_pages):
            if k == 0:
                f = pick(False)
            else:
                prev = frames[-1]
                fragment = rng.random() < self.config.fragmentation_prob
                if not fragment and prev + 1 < n_frames and not used[prev + 2]:
                    f = prev + 1
                else:
                    f = pick(True)
            used[f + 1] = True
            frames.append(f)
        return [f * self.page_size for f in frames]


class ProcPagemapProvider:
    """Reads ``/proc/self/pagemap``; needs CAP_SYS_ADMIN to see frame numbers."""

    PRESENT = 1 << 63
    PFN_MASK = (1 << 55) - 1

    def __init__(self, page_size: int | None = None, path: str = "/proc/self/pagemap"):
        self.page_size = page_size or os.sysconf("SC_PAGE_SIZE")
        self.path = path

    @classmethod
    def available(cls) -> bool:
        return sys.platform.startswith("linux") and os.access("/proc/self/pagemap", os.R_OK)

    def frames(self, roi: Roi) -> list[int]:
        if not self.available():
            raise TranslationError("pagemap interface not available on this platform")
        out = []
        with open(self.path, "rb") as fh:
            for vpage in range(roi.start // self.page_size, (roi.end - 1) // self.page_size + 1):
                fh.seek(vpage * 8)
                raw = fh.read(8)
                if len(raw) != 8:
                    raise TranslationError(f"short pagemap read at page {vpage:#x}")
                (entry,) = struct.unpack("<Q", raw)
                pfn = entry & self.PFN_MASK
                if not entry & self.PRESENT:
                    raise TranslationError(f"virtual page {vpage:#x} is not resident")
                if pfn == 0:
                    raise TranslationError("pagemap hides frame numbers; run with CAP_SYS_ADMIN")
                out.append(pfn * self.page_size)
        return out


class PinnedPayloadFrames:
    """Real frames behind a page-aligned resident copy of ``payload``.

    Page ``k`` of any ROI handed to :meth:`frames` is answered with the frame
    holding page ``k`` of the copy, so a synthetic ROI address can stand in
    for the copy's actual virtual address.
    """

    def __init__(self, payload: bytes, page_size: int | None = None,
                 pagemap: ProcPagemapProvider | None = None):
        self.page_size = page_size or mmap.PAGESIZE
        if self.page_size != mmap.PAGESIZE:
            raise TranslationError(f"the OS page size is {mmap.PAGESIZE}, not {self.page_size}")
        pages = max(1, -(-len(payload) // self.page_size))
        self._map = mmap.mmap(-1, pages * self.page_size)
        self._map[:len(payload)] = payload
        self.address = ctypes.addressof(ctypes.c_char.from_buffer(self._map))
        self._pagemap = pagemap or ProcPagemapProvider(self.page_size)

    def frames(self, roi: Roi) -> list[int]:
        if roi.size > len(self._map):
            raise TranslationError("ROI is larger than the pinned payload")
        return self._pagemap.frames(Roi(self.address, roi.size))


def build_block_map(roi: Roi, provider: PageMapProvider) -> BlockMap:
    """Translate every page of ``roi`` and coalesce physically adjacent frames."""
    page = provider.page_size
    frames = provider.frames(roi)
    first_page = roi.start // page
    n_pages = (roi.end - 1) // page - first_page + 1
    if len(frames) != n_pages:
        raise TranslationError(f"provider returned {len(frames)} frames for {n_pages} pages")
    pairs: list[BlockPair] = []
    for k, frame in enumerate(frames):
        vpage = (first_page + k) * page
        v0 = max(vpage, roi.start)
        v1 = min(vpage + page, roi.end)
        p0 = frame + (v0 - vpage)
        if pairs and pairs[-1].physical_base + pairs[-1].length == p0:
            last = pairs[-1]
            pairs[-1] = BlockPair(last.virtual_base, last.physical_base, last.length + v1 - v0)
        else:
            pairs.append(BlockPair(v0, p0, v1 - v0))
    return BlockMap(pairs, page)
