"""Acceptance criteria 1-12.

Each test records one PASS/FAIL line (shown in the terminal summary) and then
asserts it.  The slow ones share a trained toy suite and one sensitivity scan.
"""
import math
import time

import numpy as np
import pytest

from radflip import kernels
from radflip.addrspace import Roi, SyntheticAllocator, SyntheticAllocatorConfig, build_block_map
from radflip.dram import LPDDR4_8GB, SCALED, decode_many, encode_many, make_scheme
from radflip.injector import apply_flips, mcu_validity, revert
from radflip.radiation import (ErrorModelConfig, expected_daily_errors, grow_offsets, make_rng,
                               sample_multiplicities)
from radflip.scanner import (CampaignConfig, crash_rate, cdf_deviation, layer_outputs, layer_thirds,
                             map_range, plan_round, run_campaign, select_sensitive_area,
                             sensitive_share, sensitivity_scan)
from radflip.tinynn import logclip
from radflip.tinynn.engine import EngineImage, deserialize, serialize
from radflip.tinynn.runtime import Runtime
from radflip.tinynn.spec import ExitPolicy

MODEL = ErrorModelConfig()
OFF = ExitPolicy(enabled=False)
THRESHOLD = 0.9
ROUNDS = 500


def policy_for(name):
    return ExitPolicy(THRESHOLD) if name == "rednet" else OFF


@pytest.fixture(scope="module")
def images(toy_build):
    b, _ = toy_build
    return {k: EngineImage(bytes(v.data)) for k, v in b.images.items()}


@pytest.fixture(scope="module")
def test_set(toy_build):
    return toy_build[1]["test"]


@pytest.fixture(scope="module")
def clean_scan(images, test_set):
    img = images["clean"]
    before = img.sha256()
    t = time.perf_counter()
    smap = sensitivity_scan(img, test_set, OFF)
    return smap, before, img.sha256(), time.perf_counter() - t


# ------------------------------------------------------------------ 1-4

def test_01_address_round_trip(verdict):
    t = time.perf_counter()
    pa = np.arange(SCALED.capacity_bytes, dtype=np.int64)
    failures = 0
    for sid in ("S1", "S2", "S3"):
        s = make_scheme(SCALED, sid)
        failures += int(np.count_nonzero(encode_many(decode_many(pa, SCALED, s), SCALED, s) != pa))
    dt = time.perf_counter() - t
    ok = pa.size >= 1 << 20 and failures == 0 and dt < 10
    assert verdict(1, ok, f"{pa.size} addresses x 3 schemes, {failures} failures, {dt:.1f}s")


def test_02_error_model_fidelity(verdict):
    t = time.perf_counter()
    n = 100_000
    rng = make_rng(2)
    sizes = sample_multiplicities(MODEL, rng, n)
    p2, p3, big = np.mean(sizes == 2), np.mean(sizes == 3), np.mean(sizes > 3)
    rows = rng.integers(0, SCALED.rows, n)
    cols = rng.integers(0, SCALED.column_slots, n)
    offs, ok = grow_offsets(np.full(n, 2), MODEL, rng, rows, cols, SCALED)
    wordline = 100 * np.mean(offs[ok, 1, 0] == 0)
    dt = time.perf_counter() - t
    good = (abs(p2 - 0.12) <= 0.01 and abs(p3 - 0.02) <= 0.005 and abs(big - 0.01) <= 0.005
            and abs(wordline - 80) <= 2 and dt < 30)
    assert verdict(2, good, f"P2={p2:.4f} P3={p3:.4f} P>3={big:.4f} "
                            f"wordline:bitline={wordline:.1f}:{100 - wordline:.1f}, {dt:.1f}s")


def test_03_mcu_confinement(verdict):
    t = time.perf_counter()
    n, extra = 100_000, 1_000
    cfg, s = SCALED, make_scheme(SCALED, "S3")
    rng = make_rng(3)
    m = n + extra
    sizes = sample_multiplicities(MODEL, rng, m)
    rows = rng.integers(0, cfg.rows, m)
    cols = rng.integers(0, cfg.column_slots, m)
    offs, ok = grow_offsets(sizes, MODEL, rng, rows, cols, cfg)
    # a reference in the last row and column cannot grow; draw past it
    keep = np.flatnonzero(ok)[:n]
    sizes, rows, cols, offs = sizes[keep], rows[keep], cols[keep], offs[keep]
    ch = rng.integers(0, cfg.channels, n)
    rk = rng.integers(0, cfg.ranks, n)
    bk = rng.integers(0, cfg.banks, n)
    bit = rng.integers(0, cfg.block_bits, n)
    used = np.arange(offs.shape[1])[None, :] < sizes[:, None]
    fits = np.all(~used | ((offs[..., 0] >= 0) & (offs[..., 0] < 2)
                           & (offs[..., 1] >= 0) & (offs[..., 1] < 5)), axis=1)
    # every cell goes through a physical address and back
    k = np.nonzero(used)
    cells = np.stack([rows[k[0]] + offs[k][:, 0], cols[k[0]] + offs[k][:, 1],
                      ch[k[0]], rk[k[0]], bk[k[0]], bit[k[0]]], axis=1)
    back = decode_many(encode_many(cells, cfg, s), cfg, s)
    same = np.ones(n, dtype=bool)
    np.logical_and.at(same, k[0], (back[:, 2] == ch[k[0]]) & (back[:, 3] == rk[k[0]])
                      & (back[:, 4] == bk[k[0]]))
    dt = time.perf_counter() - t
    good = keep.size == n and bool(np.all(fits & same)) and dt < 30
    assert verdict(3, good, f"{int((fits & same).sum())}/{keep.size} clusters in a 2x5 box "
                            f"and one channel/rank/bank, {dt:.1f}s")


def test_04_daily_errors(verdict):
    got = expected_daily_errors(40 * 2**20 * 8, 4.76e-7)
    assert verdict(4, abs(got - 159.7) <= 0.1, f"expected_daily_errors(40 MB) = {got:.3f}")


# ------------------------------------------------------------------ 5-8

def test_05_injection_exactness(images, verdict):
    img = images["clean"]
    p0, p1 = img.parameter_range
    t = time.perf_counter()
    trials = exact = inside = 0
    for budget in (5, 50, 100, 200, 500):
        cfg = CampaignConfig(total_bits=budget, rounds=0, seed=budget)
        for r in range(200):
            bm, plan = plan_round(img, cfg, r, MODEL)
            pre = img.buffer.copy()
            rec = apply_flips(img.buffer, plan)
            exact += kernels.xor_popcount(img.buffer, pre) == budget
            revert(img.buffer, rec)
            va = np.array([v for e in plan.events for v in e.virtual], dtype=np.int64)
            pa = np.array([p for e in plan.events for p in e.physical], dtype=np.int64)
            inside += bool(np.all((va >= plan.roi.start + p0) & (va < plan.roi.start + p1))
                           and np.array_equal(bm.virt_to_phys_many(va), pa))
            trials += 1
    dt = time.perf_counter() - t
    ok = exact == trials and inside == trials and dt < 60
    assert verdict(5, ok, f"popcount exact {exact}/{trials}, in ROI {inside}/{trials}, {dt:.1f}s")


def test_06_interleaving_scatter(verdict):
    t = time.perf_counter()
    roi = Roi(0x7F00_0000_0000, 4 * 4096)
    bm = build_block_map(roi, SyntheticAllocator(SyntheticAllocatorConfig(1.0, 64 << 20, 1)))
    valid = {sid: mcu_validity(bm, (roi.start, roi.end), LPDDR4_8GB, make_scheme(LPDDR4_8GB, sid),
                               MODEL, 1000, make_rng(6))
             for sid in ("S1", "S2", "S3")}
    dt = time.perf_counter() - t
    ok = valid["S1"] > valid["S2"] and valid["S1"] > valid["S3"] and dt < 120
    assert verdict(6, ok, " ".join(f"{k}={v:.3f}" for k, v in valid.items()) + f", {dt:.1f}s")


def test_07_logclip_units(verdict):
    t = time.perf_counter()
    theta = 5.0
    eps = np.nextafter(theta, np.inf)
    table = {-1.0: 0.0, 0.0: 0.0, math.e - 1: 1.0, theta: math.log(theta + 1), eps: 0.0, 1e9: 0.0}
    branch = all(logclip(x, theta) == pytest.approx(want, abs=1e-15) for x, want in table.items())
    grid = np.linspace(theta / 1000, theta, 1000)
    y = logclip(grid, theta)
    wide = logclip(np.linspace(-1e6, 1e6, 10_001), theta)
    bound = bool(np.all(wide <= math.log(theta + 1)) and np.all(wide >= 0))
    monotone = bool(np.all(np.diff(y) > 0))
    concave = bool(np.all(np.diff(y, 2) <= 1e-12))
    dt = time.perf_counter() - t
    ok = branch and bound and monotone and concave and dt < 1
    assert verdict(7, ok, f"branches={branch} bound={bound} monotone={monotone} "
                          f"concave={concave}, {dt * 1e3:.0f}ms")


def test_08_exit_neutrality(images, test_set, verdict):
    t = time.perf_counter()
    red = images["rednet"]
    x = test_set.x[:1000]
    bare = serialize(Runtime.of(red).model.without_exits())
    full = Runtime(deserialize(red.data)).forward(x, OFF).outputs
    identical = np.array_equal(full, Runtime(deserialize(bare.data)).forward(x, OFF).outputs)
    thresholds = np.linspace(0.0, 1.0, 11)
    depth = [Runtime(deserialize(red.data)).forward(x, ExitPolicy(T)).layers_executed.mean()
             for T in thresholds]
    monotone = all(a <= b for a, b in zip(depth, depth[1:]))
    dt = time.perf_counter() - t
    ok = identical and monotone and x.shape[0] == 1000 and dt < 120
    assert verdict(8, ok, f"bit-identical={identical} depth(T=0..1)="
                          f"{[round(float(d), 3) for d in depth]}, {dt:.1f}s")


# ------------------------------------------------------------------ 9-12

def bootstrap_gap(a, b, n=10_000, seed=9):
    """95% interval of mean(a) - mean(b), resampling each independently."""
    rng = np.random.default_rng(seed)
    ia = rng.integers(0, a.size, (n, a.size))
    ib = rng.integers(0, b.size, (n, b.size))
    gaps = a[ia].mean(axis=1) - b[ib].mean(axis=1)
    return np.percentile(gaps, [2.5, 97.5])


def test_09_correlated_vs_uniform(images, test_set, verdict):
    t = time.perf_counter()
    img = images["clean"]
    drops = {}
    for correlated in (True, False):
        cfg = CampaignConfig(total_bits=100, rounds=ROUNDS, correlated=correlated)
        res = run_campaign(img, test_set, cfg, MODEL, OFF)
        drops[correlated] = res.baseline - res.performances
    lo, hi = bootstrap_gap(drops[True], drops[False])
    dt = time.perf_counter() - t
    ok = drops[True].mean() >= drops[False].mean() and lo > 0 and dt < 900
    assert verdict(9, ok, f"mean drop correlated={drops[True].mean():.2f} "
                          f"uniform={drops[False].mean():.2f}, gap 95% CI [{lo:.2f}, {hi:.2f}], {dt:.0f}s")


def test_10_protection_ordering(images, test_set, clean_scan, verdict):
    t = time.perf_counter()
    area = select_sensitive_area(clean_scan[0], images["clean"])
    settings = [("global", b) for b in (100, 200, 500)] + [("sensitive", b) for b in (5, 50, 100)]
    ordered, bounded, rows = True, True, []
    for where, bits in settings:
        rate = {}
        for name in ("clean", "clip", "rednet"):
            img = images[name]
            rng = map_range(images["clean"], img, area) if where == "sensitive" else None
            cfg = CampaignConfig(total_bits=bits, rounds=ROUNDS, area=where, sensitive_range=rng)
            rate[name] = crash_rate(run_campaign(img, test_set, cfg, MODEL, policy_for(name)))
        ordered &= rate["rednet"] <= rate["clip"] <= rate["clean"]
        if where == "global":
            bounded &= rate["rednet"] <= 0.02
        rows.append(f"{where[0]}{bits}:{rate['clean']:.3f}/{rate['clip']:.3f}/{rate['rednet']:.3f}")
    dt = time.perf_counter() - t
    ok = ordered and bounded and dt < 45 * 60
    assert verdict(10, ok, f"crash clean/clip/rednet {' '.join(rows)}; ordered={ordered} "
                           f"rednet_global<=0.02={bounded}, {dt:.0f}s")


def test_11_cdf_suppression(images, test_set, verdict):
    t = time.perf_counter()
    x = test_set.stratified(256, 11).x
    n_layers = len(Runtime.of(images["clean"]).backbone)
    pos = n_layers // 2
    ks = {}
    for name in ("clean", "rednet"):
        img = images[name]
        ref = layer_outputs(img, x, pos)
        cfg = CampaignConfig(total_bits=100, rounds=50, seed=11)
        vals = []
        for r in range(cfg.rounds):
            _, plan = plan_round(img, cfg, r, MODEL)
            rec = apply_flips(img.buffer, plan)
            try:
                vals.append(cdf_deviation(ref, layer_outputs(img, x, pos)))
            finally:
                revert(img.buffer, rec)
        ks[name] = float(np.mean(vals))
    dt = time.perf_counter() - t
    ok = ks["rednet"] < ks["clean"] and dt < 300
    assert verdict(11, ok, f"mean KS at backbone layer {pos}/{n_layers} over 50 injections: "
                           f"relu={ks['clean']:.4f} logclip={ks['rednet']:.4f}, {dt:.0f}s")


def test_12_nondestructive_scan(images, clean_scan, verdict):
    smap, before, after, dt = clean_scan
    shallow, deep = layer_thirds(len(Runtime.of(images["clean"]).backbone))
    s, d = sensitive_share(smap, shallow), sensitive_share(smap, deep)
    ok = before == after and s > d and dt < 20 * 60
    assert verdict(12, ok, f"hash unchanged={before == after}, share of sensitive bits "
                           f"shallow={s:.3f} deep={d:.3f}, {dt:.0f}s")
