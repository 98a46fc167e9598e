"""Statistical model of radiation-induced upsets.

Single-event upsets flip one cell.  Multiple-cell upsets flip a connected
cluster that stays in one channel/rank/bank and inside a small box of
rows x columns anchored at a reference cell.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .dram import CellCoord, DramConfig

MAX_MULTIPLICITY = 8
#: per-bit daily upset rate measured in orbit
ORBIT_RATE_PER_BIT_DAY = 4.76e-7


class ModelError(ValueError):
    """Invalid error model or an unreachable cluster request."""


def _default_pmf() -> dict[int, float]:
    pmf = {2: 0.12, 3: 0.02}
    tail = 0.01 / 5  # sizes 4..8 share the 1% "more than 3 bits" mass evenly
    pmf.update({k: tail for k in range(4, MAX_MULTIPLICITY + 1)})
    pmf[1] = 1.0 - sum(pmf.values())
    return dict(sorted(pmf.items()))


@dataclass(frozen=True)
class ErrorModelConfig:
    multiplicity_pmf: dict[int, float] = field(default_factory=_default_pmf)
    wordline_prob: float = 0.8
    bitline_prob: float = 0.2
    max_row_extent: int = 2
    max_col_extent: int = 5
    rng_seed: int = 0

    def __post_init__(self):
        pmf = {int(k): float(v) for k, v in self.multiplicity_pmf.items()}
        object.__setattr__(self, "multiplicity_pmf", dict(sorted(pmf.items())))
        if not pmf:
            raise ModelError("multiplicity_pmf is empty")
        if any(k < 1 or k > MAX_MULTIPLICITY for k in pmf):
            raise ModelError("multiplicity support must lie in 1..8")
        if any(v < 0 for v in pmf.values()):
            raise ModelError("negative probability in multiplicity_pmf")
        if abs(sum(pmf.values()) - 1.0) > 1e-9:
            raise ModelError(f"multiplicity_pmf sums to {sum(pmf.values())}, not 1")
        if abs(self.wordline_prob + self.bitline_prob - 1.0) > 1e-9:
            raise ModelError("wordline_prob + bitline_prob must equal 1")
        if not 0.0 <= self.wordline_prob <= 1.0:
            raise ModelError("wordline_prob must be a probability")
        if self.max_row_extent < 1 or self.max_col_extent < 1:
            raise ModelError("cluster extents must be >= 1")
        if self.max_row_extent * self.max_col_extent > 64:
            raise ModelError("cluster box may hold at most 64 cells")
        if max(pmf) > self.max_row_extent * self.max_col_extent:
            raise ModelError("largest multiplicity does not fit the cluster box")

    @property
    def sizes(self) -> np.ndarray:
        return np.array(list(self.multiplicity_pmf), dtype=np.int64)

    @property
    def cdf(self) -> np.ndarray:
        c = np.cumsum(list(self.multiplicity_pmf.values()))
        c[-1] = 1.0
        return c

    def conditional(self, min_size: int) -> "ErrorModelConfig":
        """Same model restricted to multiplicities >= ``min_size``."""
        kept = {k: v for k, v in self.multiplicity_pmf.items() if k >= min_size and v > 0}
        if not kept:
            raise ModelError(f"no multiplicity >= {min_size} has positive mass")
        total = sum(kept.values())
        return ErrorModelConfig({k: v / total for k, v in kept.items()},
                                self.wordline_prob, self.bitline_prob,
                                self.max_row_extent, self.max_col_extent, self.rng_seed)

    @classmethod
    def from_dict(cls, data: dict) -> "ErrorModelConfig":
        known = set(cls.__dataclass_fields__)
        if set(data) - known:
            raise ModelError(f"unknown error model keys: {sorted(set(data) - known)}")
        try:
            return cls(**data)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ModelError):
                raise
            raise ModelError(str(exc)) from None

    def to_dict(self) -> dict:
        return {
            "multiplicity_pmf": {str(k): v for k, v in self.multiplicity_pmf.items()},
            "wordline_prob": self.wordline_prob,
            "bitline_prob": self.bitline_prob,
            "max_row_extent": self.max_row_extent,
            "max_col_extent": self.max_col_extent,
            "rng_seed": self.rng_seed,
        }


def load_error_model(path: str | Path) -> ErrorModelConfig:
    return ErrorModelConfig.from_dict(json.loads(Path(path).read_text()))


def make_rng(seed) -> np.random.Generator:
    """The release PRNG: PCG64 seeded through ``SeedSequence``."""
    return np.random.Generator(np.random.PCG64(seed))


@dataclass(frozen=True)
class FlipCluster:
    cells: tuple[CellCoord, ...]
    reference: CellCoord

    @property
    def multiplicity(self) -> int:
        return len(self.cells)


@dataclass(frozen=True)
class EventMix:
    cluster_sizes: tuple[int, ...]

    @property
    def total_bits(self) -> int:
        return sum(self.cluster_sizes)

    def histogram(self) -> dict[int, int]:
        sizes, counts = np.unique(self.cluster_sizes, return_counts=True)
        return {int(s): int(c) for s, c in zip(sizes, counts)}


def sample_multiplicities(model: ErrorModelConfig, rng: np.random.Generator, n: int) -> np.ndarray:
    u = rng.random(n)
    idx = np.searchsorted(model.cdf, u, side="right")
    return model.sizes[np.minimum(idx, len(model.sizes) - 1)]


def sample_multiplicity(model: ErrorModelConfig, rng: np.random.Generator) -> int:
    return int(sample_multiplicities(model, rng, 1)[0])


def grow_offsets(sizes, model: ErrorModelConfig, rng: np.random.Generator,
                 ref_rows, ref_cols, cfg: DramConfig) -> tuple[np.ndarray, np.ndarray]:
    """Batch cluster growth; returns ``(offsets[n, box, 2], ok[n])``.

    Offsets are ``(drow, dcol)`` from each reference, in growth order, padded
    with -1.  ``ok`` is False where the device edge left too few cells.
    """
    sizes = np.ascontiguousarray(sizes, dtype=np.int64)
    n = sizes.shape[0]
    steps = max(int(sizes.max(initial=1)) - 1, 1)
    u = rng.random((n, steps, 2))
    return kernels.grow_clusters(
        sizes, u, float(model.wordline_prob),
        np.ascontiguousarray(ref_rows, dtype=np.int64),
        np.ascontiguousarray(ref_cols, dtype=np.int64),
        cfg.rows, cfg.column_slots, model.max_row_extent, model.max_col_extent)


def sample_cluster(reference: CellCoord, multiplicity: int, model: ErrorModelConfig,
                   cfg: DramConfig, rng: np.random.Generator) -> FlipCluster:
    """Grow a cluster of ``multiplicity`` cells from ``reference``.

    Each growth step adds an unoccupied neighbour: along the wordline (same
    row, adjacent column) with ``wordline_prob``, otherwise along the
    bitline or diagonally into the adjacent row.  All cells share the
    reference's channel, rank, bank and bit position within the burst.
    """
    if multiplicity < 1:
        raise ModelError("multiplicity must be >= 1")
    if multiplicity > model.max_row_extent * model.max_col_extent:
        raise ModelError(
            f"{multiplicity} cells cannot fit a {model.max_row_extent}x"
            f"{model.max_col_extent} box")
    offs, ok = grow_offsets([multiplicity], model, rng, [reference.row],
                            [reference.column], cfg)
    if not ok[0]:
        raise ModelError(f"device edge leaves fewer than {multiplicity} cells near {reference}")
    cells = tuple(
        reference._replace(row=reference.row + int(dr), column=reference.column + int(dc))
        for dr, dc in offs[0, :multiplicity])
    return FlipCluster(cells=cells, reference=reference)


def compose_event_mix(total_bits: int, model: ErrorModelConfig,
                      rng: np.random.Generator) -> EventMix:
    """Draw cluster sizes until ``total_bits`` is met exactly.

    A draw that would overshoot the budget is replaced by single-bit
    events filling the remainder.
    """
    if total_bits < 1:
        raise ValueError("total_bits must be >= 1")
    sizes: list[int] = []
    remaining = total_bits
    while remaining:
        s = sample_multiplicity(model, rng)
        if s <= remaining:
            sizes.append(s)
            remaining -= s
        else:
            sizes.extend([1] * remaining)
            remaining = 0
    return EventMix(tuple(sizes))


def expected_daily_errors(footprint_bits: float, rate: float = ORBIT_RATE_PER_BIT_DAY) -> float:
    if footprint_bits < 0 or rate < 0:
        raise ValueError("footprint and rate must be non-negative")
    return footprint_bits * rate
