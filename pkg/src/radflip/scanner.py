"""Sensitivity scans and multi-round injection campaigns over engine images."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .addrspace import (DEFAULT_PAGE_SIZE, Roi, SyntheticAllocator, SyntheticAllocatorConfig,
                        build_block_map)
from .dram import LPDDR4_8GB, SCALED, TOY, AddressScheme, DramConfig, make_scheme
from .injector import (DEFAULT_MAX_ATTEMPTS, PlanningError, apply_flips, plan_injection,
                       plan_uniform, revert)
from .radiation import ErrorModelConfig, make_rng
from .tinynn.data import Dataset
from .tinynn.engine import EngineFormatError, EngineImage, deserialize
from .tinynn.evaluate import score_outputs
from .tinynn import activations
from .tinynn.ops import wrap_int32
from .tinynn.runtime import NO_EXITS, Runtime
from .tinynn.spec import ExitPolicy

#: a round (or a bit) is a crash when performance falls by at least this many points
CRASH_DROP = 10.0
_EPS = 1e-9
DEVICES = {"toy": TOY, "scaled": SCALED, "lpddr4-8gb": LPDDR4_8GB}
DEFAULT_ROI_BASE = 0x7F00_0000_0000
_BATCH_ELEMENTS = 1 << 21


class CampaignError(RuntimeError):
    pass


def is_crash(baseline: float, performance: float) -> bool:
    return baseline - performance >= CRASH_DROP - _EPS


# ---------------------------------------------------------------- scanning

@dataclass
class SensitivityMap:
    """Per-bit performance drop (points) of flipping that bit alone.

    ``delta`` is ``(image bytes, 8)`` with NaN for bits outside the scanned
    region; ``parse_error`` marks flips that made the image unloadable.
    """

    baseline: float
    delta: np.ndarray
    parse_error: np.ndarray
    owner: np.ndarray
    parts: np.ndarray
    page_size: int = DEFAULT_PAGE_SIZE
    eval_size: int = 0

    @property
    def image_size(self) -> int:
        return self.delta.shape[0]

    @property
    def scanned(self) -> np.ndarray:
        return ~np.isnan(self.delta)

    def sensitive(self, threshold: float = CRASH_DROP) -> np.ndarray:
        with np.errstate(invalid="ignore"):
            return self.delta >= threshold - _EPS

    def layer_counts(self, threshold: float = CRASH_DROP) -> dict[int, tuple[int, int]]:
        """``layer -> (sensitive bits, scanned bits)``."""
        sens = self.sensitive(threshold).sum(axis=1)
        scanned = self.scanned.sum(axis=1)
        out = {}
        for layer in np.unique(self.owner):
            m = self.owner == layer
            out[int(layer)] = (int(sens[m].sum()), int(scanned[m].sum()))
        return out

    def page_grid(self, cell_bytes: int = 64, threshold: float = CRASH_DROP) -> np.ndarray:
        """Sensitive-bit counts, one row per page, ``page_size / cell_bytes`` cells per row."""
        if self.page_size % cell_bytes:
            raise ValueError("cell_bytes must divide the page size")
        pages = math.ceil(self.image_size / self.page_size)
        counts = np.zeros(pages * self.page_size, dtype=np.int64)
        counts[:self.image_size] = self.sensitive(threshold).sum(axis=1)
        return counts.reshape(pages, self.page_size // cell_bytes, cell_bytes).sum(axis=2)

    def write_csv(self, path: str | Path, threshold: float = CRASH_DROP) -> int:
        """One row per scanned bit; returns the row count."""
        off, bit = np.nonzero(self.scanned)
        sens = self.sensitive(threshold)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["offset", "bit", "page", "layer", "part", "delta", "sensitive", "parse_error"])
            for o, b in zip(off, bit):
                w.writerow([int(o), int(b), int(o) // self.page_size, int(self.owner[o]),
                            self.parts[o], f"{float(self.delta[o, b]):.6g}",
                            int(sens[o, b]), int(self.parse_error[o, b])])
        return len(off)

    def write_page_grid(self, path: str | Path, cell_bytes: int = 64,
                        threshold: float = CRASH_DROP) -> tuple[int, int]:
        grid = self.page_grid(cell_bytes, threshold)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["page"] + [f"b{c * cell_bytes}" for c in range(grid.shape[1])])
            for p, row in enumerate(grid):
                w.writerow([p] + row.tolist())
        return grid.shape


class _Evaluator:
    """Clean reference run on the scan subset, and scoring of patched runs."""

    def __init__(self, image: EngineImage, ds: Dataset, policy: ExitPolicy):
        self.ds = ds
        self.policy = policy
        self.rt = Runtime(deserialize(image.data))
        self.clean = self.rt.forward(ds.x, policy)
        self.baseline = score_outputs(self.clean.outputs, ds)
        self.states = self.rt.trace(ds.x)
        self.n = len(ds)
        self.classify = ds.task == "classification"
        if self.classify:
            with np.errstate(all="ignore"):
                self.clean_ok = np.argmax(self.clean.outputs, axis=1) == ds.y

    def scores(self, rows: np.ndarray, outputs: np.ndarray) -> np.ndarray:
        """Performance for each of ``F`` variants whose rows ``rows`` produced
        ``outputs[F, len(rows), out]``; other rows keep their clean output."""
        if self.classify:
            with np.errstate(all="ignore"):
                ok = np.argmax(outputs, axis=2) == self.ds.y[rows][None, :]
            base = int(self.clean_ok.sum() - self.clean_ok[rows].sum())
            return 100.0 * (base + ok.sum(axis=1)) / self.n
        out = []
        for o in outputs:
            full = self.clean.outputs.copy()
            full[rows] = o
            out.append(score_outputs(full, self.ds))
        return np.array(out)


def _flip_int8(values: np.ndarray, bits: np.ndarray) -> np.ndarray:
    return (values.view(np.uint8) ^ (1 << bits).astype(np.uint8)).view(np.int8)


def _flip_int32(values: np.ndarray, bits: np.ndarray) -> np.ndarray:
    """``bits`` count from the least significant bit of the little-endian word."""
    mask = np.left_shift(np.uint32(1), np.asarray(bits, dtype=np.uint32))
    return (np.ascontiguousarray(values, dtype=np.int32).view(np.uint32) ^ mask).view(np.int32)


def _scan_backbone_layer(ev: _Evaluator, pos: int, layer_idx: int, entry, byte_lo: int,
                         byte_hi: int, delta: np.ndarray) -> None:
    """Batched scan of one backbone weight or bias blob.

    A flip changes one output unit of the layer; that unit is recomputed
    from the cached integer accumulator and the rest of the network runs
    on the patched activations.
    """
    rt, layer = ev.rt, ev.rt.layers[layer_idx]
    offs = np.arange(byte_lo, byte_hi)
    off, bit = np.repeat(offs, 8), np.tile(np.arange(8), offs.size)
    rows = np.flatnonzero(ev.clean.exit_index > pos)
    if rows.size == 0:
        delta[off, bit] = 0.0
        return
    operand, sa, spatial = rt.layer_inputs(layer_idx, ev.states[pos][rows])
    acc = rt.accumulate(layer_idx, operand)
    out_clean = ev.states[pos + 1][rows]
    fan_in = operand.shape[1]
    if entry.part == "weight":
        w = off - entry.start
        unit, src = w // fan_in, w % fan_in
        old = layer.weight[w]
        d = _flip_int8(old, bit).astype(np.float64) - old.astype(np.float64)
        bias = rt._b[layer_idx][unit]
    else:
        k = off - entry.start
        unit = k // 4
        new = _flip_int32(layer.bias[unit], 8 * (k % 4) + bit)
        src, d, bias = None, None, new.astype(np.float64) * layer.bias_scale
    width = int(np.prod(out_clean.shape[1:]))
    step = max(1, _BATCH_ELEMENTS // (rows.size * width))
    with np.errstate(all="ignore"):
        for s in range(0, off.size, step):
            sl = slice(s, s + step)
            u = unit[sl]
            a = acc[:, u]  # (n, F) or (n, F, P)
            if d is not None:
                x = operand[:, src[sl]]
                a = a + (d[sl].reshape((1, -1) + (1,) * (x.ndim - 2)) * x)
                if np.abs(a).max(initial=0.0) >= float(1 << 31):
                    a = wrap_int32(a).astype(np.float64)
            b = bias[sl].reshape((1, -1) + (1,) * (a.ndim - 2))
            pre = layer.scale * sa.reshape((-1,) + (1,) * (a.ndim - 1)) * a + b
            col = activations.apply(layer.activation, pre, layer.theta)  # (n, F[, P])
            col = np.moveaxis(col, 1, 0)  # (F, n[, P])
            old_col = np.moveaxis(out_clean[:, u], 1, 0) if spatial is None else \
                np.moveaxis(out_clean.reshape(rows.size, out_clean.shape[1], -1)[:, u], 1, 0)
            same = (col == old_col) | (np.isnan(col) & np.isnan(old_col))
            changed = ~same.reshape(same.shape[0], -1).all(axis=1)
            res = np.zeros(col.shape[0])
            if changed.any():
                ci = np.flatnonzero(changed)
                h = np.repeat(out_clean[None], ci.size, axis=0)
                if spatial is None:
                    h[np.arange(ci.size), :, u[ci]] = col[ci]
                else:
                    hh = h.reshape(ci.size, rows.size, out_clean.shape[1], -1)
                    hh[np.arange(ci.size), :, u[ci]] = col[ci]
                flat = h.reshape((ci.size * rows.size,) + out_clean.shape[1:])
                r = rt.run_from(flat, pos + 1, ev.policy, rt.new_result(flat.shape[0]))
                perf = ev.scores(rows, r.outputs.reshape(ci.size, rows.size, -1))
                res[ci] = ev.baseline - perf
            delta[off[sl], bit[sl]] = res


def _scan_generic(ev: _Evaluator, image: EngineImage, offsets: np.ndarray, delta: np.ndarray,
                  parse_error: np.ndarray) -> None:
    """Flip each bit in the live image, reload it, evaluate, flip back."""
    buf = image.buffer
    for o in offsets:
        for b in range(8):
            buf[o] ^= np.uint8(1 << b)
            try:
                try:
                    res = Runtime(deserialize(image.data)).forward(ev.ds.x, ev.policy)
                    perf = score_outputs(res.outputs, ev.ds)
                except EngineFormatError:
                    perf = 0.0
                    parse_error[o, b] = True
            finally:
                buf[o] ^= np.uint8(1 << b)
            delta[o, b] = ev.baseline - perf


def _scan_head_blob(ev: _Evaluator, entry, byte_lo: int, byte_hi: int, delta: np.ndarray) -> None:
    """Exit-head blobs: patch the layer and rerun from the head's attach point."""
    rt = ev.rt
    layer = rt.layers[entry.layer]
    attach = entry.group
    rows = np.flatnonzero(ev.clean.exit_index >= attach) if ev.policy.enabled else np.zeros(0, int)
    offs = np.arange(byte_lo, byte_hi)
    if rows.size == 0:
        delta[offs] = 0.0
        return
    h0 = ev.states[attach][rows]
    w_saved, b_saved = rt._w[entry.layer], rt._b[entry.layer]
    try:
        for o in offs:
            for b in range(8):
                if entry.part == "weight":
                    q = layer.weight.copy()
                    q[o - entry.start] = _flip_int8(q[o - entry.start:o - entry.start + 1], np.array([b]))[0]
                    rt._w[entry.layer] = (q.astype(np.float64) - layer.zero_point).reshape(layer.dims[1], -1)
                else:
                    q = layer.bias.copy()
                    k = (o - entry.start) // 4
                    q[k] = _flip_int32(q[k:k + 1], np.array([8 * ((o - entry.start) % 4) + b]))[0]
                    rt._b[entry.layer] = q.astype(np.float64) * layer.bias_scale
                r = rt.run_from(h0, attach, ev.policy, rt.new_result(rows.size))
                delta[o, b] = ev.baseline - ev.scores(rows, r.outputs[None])[0]
                rt._w[entry.layer], rt._b[entry.layer] = w_saved, b_saved
    finally:
        rt._w[entry.layer], rt._b[entry.layer] = w_saved, b_saved


def sensitivity_scan(engine: EngineImage, eval_set: Dataset, policy: ExitPolicy = NO_EXITS, *,
                     region: tuple[int, int] | None = None, eval_size: int = 64, seed: int = 0,
                     page_size: int = DEFAULT_PAGE_SIZE) -> SensitivityMap:
    """Flip every bit of ``region`` (default: the whole image) one at a time.

    Each flip is scored on a fixed stratified subset of ``eval_size``
    samples.  Flips that make the image unloadable score 0.  The image is
    left byte-identical.
    """
    n = len(engine)
    lo, hi = (0, n) if region is None else (int(region[0]), int(region[1]))
    if not 0 <= lo < hi <= n:
        raise ValueError("scan region outside the image")
    ds = eval_set.stratified(eval_size, seed) if len(eval_set) > eval_size else eval_set
    ev = _Evaluator(engine, ds, policy)
    delta = np.full((n, 8), np.nan, dtype=np.float64)
    parse_error = np.zeros((n, 8), dtype=bool)
    backbone_pos = {i: p for p, i in enumerate(ev.rt.backbone)}
    for e in engine.layout:
        a, b = max(e.start, lo), min(e.end, hi)
        if a >= b:
            continue
        if e.part in ("weight", "bias") and e.group == 0:
            _scan_backbone_layer(ev, backbone_pos[e.layer], e.layer, e, a, b, delta)
        elif e.part in ("weight", "bias"):
            _scan_head_blob(ev, e, a, b, delta)
        else:
            _scan_generic(ev, engine, np.arange(a, b), delta, parse_error)
    parts = np.empty(n, dtype=object)
    for e in engine.layout:
        parts[e.start:e.end] = e.part
    return SensitivityMap(ev.baseline, delta, parse_error, engine.owner_array(), parts,
                          page_size, len(ds))


def layer_thirds(n_layers: int) -> tuple[list[int], list[int]]:
    """Backbone layer indices of the shallow and deep thirds."""
    k = max(1, n_layers // 3)
    return list(range(k)), list(range(n_layers - k, n_layers))


def sensitive_share(smap: SensitivityMap, layers, threshold: float = CRASH_DROP) -> float:
    """Fraction of all sensitive bits that sit in ``layers``."""
    counts = smap.layer_counts(threshold)
    total = sum(s for s, _ in counts.values())
    if total == 0:
        return 0.0
    return sum(counts.get(l, (0, 0))[0] for l in layers) / total


def select_sensitive_area(smap: SensitivityMap, image: EngineImage, size: int = DEFAULT_PAGE_SIZE,
                          threshold: float = CRASH_DROP) -> tuple[int, int]:
    """Contiguous ``size``-byte window of the parameter blobs holding the most sensitive bits."""
    p0, p1 = image.parameter_range
    size = min(size, p1 - p0)
    per_byte = smap.sensitive(threshold)[p0:p1].sum(axis=1)
    window = np.convolve(per_byte, np.ones(size, dtype=np.int64), mode="valid")
    start = p0 + int(np.argmax(window))
    return start, start + size


def map_range(src: EngineImage, dst: EngineImage, rng: tuple[int, int]) -> tuple[int, int]:
    """Translate a byte range to the same layer/component offsets in another image."""
    start, end = rng
    e = src.locate(start)
    twins = dst.entries(e.part, e.layer)
    if not twins:
        raise ValueError(f"destination image has no {e.part} blob for layer {e.layer}")
    t = twins[0]
    new_start = t.start + (start - e.start)
    new_end = new_start + (end - start)
    last = src.locate(end - 1)
    last_twin = dst.entries(last.part, last.layer)
    if not last_twin or last_twin[0].start + (end - 1 - last.start) != new_end - 1:
        raise ValueError("range does not map contiguously between the images")
    return new_start, new_end


# ---------------------------------------------------------------- campaigns

@dataclass(frozen=True)
class CampaignConfig:
    total_bits: int
    rounds: int = 500
    area: str = "global"
    sensitive_range: tuple[int, int] | None = None
    scheme_id: str = "S1"
    device: str = "toy"
    fragmentation_prob: float = 1.0
    physical_space: int = 0  # 0: smallest power of two >= 2x the image
    page_size: int = DEFAULT_PAGE_SIZE
    seed: int = 0
    correlated: bool = True
    roi_base: int = DEFAULT_ROI_BASE
    max_attempts: int = DEFAULT_MAX_ATTEMPTS

    def __post_init__(self):
        if self.total_bits < 1:
            raise ValueError("total_bits must be >= 1")
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")
        if self.area not in ("global", "sensitive"):
            raise ValueError("area must be 'global' or 'sensitive'")
        if self.area == "sensitive":
            if self.sensitive_range is None:
                raise ValueError("sensitive campaigns need sensitive_range")
            a, b = self.sensitive_range
            if not 0 <= a < b:
                raise ValueError("sensitive_range must be a non-empty [start, end)")
        if self.device not in DEVICES:
            raise ValueError(f"unknown device {self.device!r}")
        if self.roi_base % self.page_size:
            raise ValueError("roi_base must be page aligned")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sensitive_range"] = list(self.sensitive_range) if self.sensitive_range else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CampaignConfig":
        d = dict(d)
        if d.get("sensitive_range") is not None:
            d["sensitive_range"] = tuple(d["sensitive_range"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown campaign keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class RoundResult:
    round: int
    performance: float
    drop: float
    crash: bool
    mean_depth: float
    parse_error: bool
    attempts: int


@dataclass
class CampaignResult:
    config: CampaignConfig
    baseline: float
    baseline_depth: float
    rounds: list[RoundResult] = field(default_factory=list)
    variant: str = ""

    @property
    def performances(self) -> np.ndarray:
        return np.array([r.performance for r in self.rounds], dtype=np.float64)

    def summary(self) -> dict:
        perf = self.performances
        have = perf.size > 0
        return {
            "variant": self.variant, "area": self.config.area,
            "total_bits": self.config.total_bits, "rounds": len(self.rounds),
            "baseline": self.baseline,
            "mean": float(perf.mean()) if have else None,
            "min": float(perf.min()) if have else None,
            "max": float(perf.max()) if have else None,
            "crash_rate": crash_rate(self) if have else None,
            "mean_depth": float(np.mean([r.mean_depth for r in self.rounds])) if have else None,
            "config": self.config.to_dict(),
        }

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(ROUND_COLUMNS)
        for r in self.rounds:
            w.writerow([r.round, repr(r.performance), repr(r.drop), int(r.crash),
                        repr(r.mean_depth), int(r.parse_error), r.attempts])
        return out.getvalue()

    def write(self, directory: str | Path) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "rounds.csv").write_text(self.to_csv())
        (d / "summary.json").write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")


ROUND_COLUMNS = ["round", "performance", "drop", "crash", "mean_depth", "parse_error", "attempts"]


def crash_rate(result: CampaignResult) -> float:
    """Fraction of rounds whose performance fell >= 10 points below baseline."""
    if not result.rounds:
        raise ValueError("no rounds to rate")
    return sum(is_crash(result.baseline, r.performance) for r in result.rounds) / len(result.rounds)


def _physical_space(cfg: CampaignConfig, image_size: int, device: DramConfig) -> int:
    if cfg.physical_space:
        return cfg.physical_space
    need = max(2 * image_size, 16 * cfg.page_size)
    return min(1 << (need - 1).bit_length(), device.capacity_bytes)


def _target(cfg: CampaignConfig, image: EngineImage) -> tuple[int, int]:
    if cfg.area == "global":
        return image.parameter_range
    a, b = cfg.sensitive_range
    if b > len(image):
        raise CampaignError("sensitive range runs past the end of the image")
    return a, b


def plan_round(image: EngineImage, cfg: CampaignConfig, round_index: int,
               error_model: ErrorModelConfig, device: DramConfig | None = None,
               scheme: AddressScheme | None = None, provider=None):
    """Block map and injection plan for one round; seeded by ``(seed, round)``.

    ``provider`` replaces the synthetic allocator (e.g. the OS pagemap).
    """
    device = device or DEVICES[cfg.device]
    scheme = scheme or make_scheme(device, cfg.scheme_id.upper())
    seq = np.random.SeedSequence([cfg.seed, round_index])
    alloc_seed, plan_seed = (int(s) for s in seq.generate_state(2))
    roi = Roi(cfg.roi_base, len(image))
    if provider is None:
        provider = SyntheticAllocator(SyntheticAllocatorConfig(
            cfg.fragmentation_prob, _physical_space(cfg, len(image), device), alloc_seed), cfg.page_size)
    block_map = build_block_map(roi, provider)
    t0, t1 = _target(cfg, image)
    target = (roi.start + t0, roi.start + t1)
    rng = make_rng(plan_seed)
    if cfg.correlated:
        plan = plan_injection(roi, block_map, device, scheme, error_model, cfg.total_bits, rng,
                              target=target, seed=plan_seed, max_attempts=cfg.max_attempts)
    else:
        plan = plan_uniform(roi, block_map, cfg.total_bits, rng, target=target, seed=plan_seed)
    return block_map, plan


def _evaluate_image(image: EngineImage, ds: Dataset, policy: ExitPolicy) -> tuple[float, float, bool]:
    try:
        res = Runtime(deserialize(image.data)).forward(ds.x, policy)
    except EngineFormatError:
        return 0.0, float("nan"), True
    return score_outputs(res.outputs, ds), float(res.layers_executed.mean()), False


def run_campaign(engine: EngineImage, eval_set: Dataset, config: CampaignConfig,
                 error_model: ErrorModelConfig = ErrorModelConfig(),
                 policy: ExitPolicy = NO_EXITS, device: DramConfig | None = None,
                 variant: str = "", scheme: AddressScheme | None = None,
                 provider=None) -> CampaignResult:
    """Inject, evaluate and revert ``config.rounds`` times.

    Every round rebuilds the block map and draws a fresh plan from seeds
    derived from ``(config.seed, round)``.  Planning failures raise
    :class:`CampaignError`; the image is restored before returning.
    """
    base, base_depth, broken = _evaluate_image(engine, eval_set, policy)
    if broken:
        raise CampaignError("the clean engine image does not load")
    result = CampaignResult(config, base, base_depth, variant=variant)
    for r in range(config.rounds):
        try:
            _, plan = plan_round(engine, config, r, error_model, device, scheme, provider)
        except PlanningError as exc:
            raise CampaignError(f"round {r}: {exc}") from exc
        record = apply_flips(engine.buffer, plan)
        try:
            perf, depth, broken = _evaluate_image(engine, eval_set, policy)
        finally:
            revert(engine.buffer, record)
        result.rounds.append(RoundResult(r, perf, base - perf, is_crash(base, perf), depth,
                                         broken, plan.attempts))
    return result


# ---------------------------------------------------------------- distributions

def cdf_deviation(clean_outputs, errored_outputs) -> float:
    """Kolmogorov-Smirnov statistic between two samples."""
    a = np.sort(np.asarray(clean_outputs, dtype=np.float64).ravel())
    b = np.sort(np.asarray(errored_outputs, dtype=np.float64).ravel())
    if a.size == 0 or b.size == 0:
        raise ValueError("both samples must be non-empty")
    a = np.where(np.isnan(a), np.inf, a)
    b = np.where(np.isnan(b), np.inf, b)
    grid = np.concatenate([a, b])
    fa = np.searchsorted(a, grid, side="right") / a.size
    fb = np.searchsorted(b, grid, side="right") / b.size
    return float(np.max(np.abs(fa - fb)))


def layer_outputs(engine, x: np.ndarray, backbone_position: int) -> np.ndarray:
    """Output of one backbone layer (1-based) for every sample, exits ignored."""
    return Runtime.of(engine).trace(x)[backbone_position]
