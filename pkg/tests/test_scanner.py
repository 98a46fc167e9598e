import csv
import json

import numpy as np
import pytest

from nets import CONV_SPEC, DENSE_SPEC, DET_SPEC, engine, inputs
from radflip.dram import TOY
from radflip.injector import PlanningError
from radflip.radiation import ErrorModelConfig
from radflip.scanner import (CRASH_DROP, ROUND_COLUMNS, CampaignConfig, CampaignError, CampaignResult,
                             RoundResult, SensitivityMap, cdf_deviation, crash_rate, is_crash,
                             layer_outputs, layer_thirds, map_range, plan_round, run_campaign,
                             select_sensitive_area, sensitive_share, sensitivity_scan)
from radflip.tinynn.data import Dataset
from radflip.tinynn.engine import EngineFormatError, EngineImage, deserialize
from radflip.tinynn.evaluate import score_outputs
from radflip.tinynn.runtime import NO_EXITS, Runtime
from radflip.tinynn.spec import ExitPolicy


def labelled(image, n=24, seed=3, shape=(1, 8, 8), policy=NO_EXITS):
    """Inputs labelled with the clean image's own predictions, so baseline is 100."""
    x = inputs(n, shape, seed)
    out = Runtime.of(image).forward(x, policy).outputs
    return Dataset(x, np.argmax(out, axis=1), ("a", "b", "c"))


def brute_force(image, ds, policy, lo, hi):
    base = score_outputs(Runtime.of(image).forward(ds.x, policy).outputs, ds)
    delta = np.zeros((hi - lo, 8))
    for o in range(lo, hi):
        for b in range(8):
            data = bytearray(image.data)
            data[o] ^= 1 << b
            try:
                perf = score_outputs(Runtime(deserialize(data)).forward(ds.x, policy).outputs, ds)
            except EngineFormatError:
                perf = 0.0
            delta[o - lo, b] = base - perf
    return delta


@pytest.mark.parametrize("spec,policy", [(DENSE_SPEC, NO_EXITS), (DENSE_SPEC, ExitPolicy(0.4)),
                                         (CONV_SPEC, NO_EXITS), (CONV_SPEC, ExitPolicy(0.35))])
def test_batched_scan_matches_flip_and_reload(spec, policy):
    img = engine(spec, "logclip" if policy.enabled else "relu", seed=1)
    ds = labelled(img, policy=policy)
    smap = sensitivity_scan(img, ds, policy, eval_size=len(ds))
    lo, hi = img.parameter_range
    expect = brute_force(img, ds, policy, lo, hi)
    np.testing.assert_allclose(smap.delta[lo:hi], expect, atol=1e-9)
    assert smap.baseline == 100.0


def test_header_and_table_flips_match_reload():
    img = engine(DENSE_SPEC, seed=2)
    ds = labelled(img)
    lo = img.parameter_range[0]
    smap = sensitivity_scan(img, ds, region=(0, lo), eval_size=len(ds))
    np.testing.assert_allclose(smap.delta[:lo], brute_force(img, ds, NO_EXITS, 0, lo), atol=1e-9)
    # the magic bytes can never be flipped into a loadable image
    assert smap.parse_error[:4].all()
    assert (smap.delta[:4] == smap.baseline).all()


def test_detection_scan_matches_reload():
    img = engine(DET_SPEC, seed=0)
    x = inputs(8, seed=5)
    y = np.zeros((8, 2, 2, 6))
    y[:, 0, 0] = [1, 0.5, 0.5, 0.5, 0.5, 1]
    ds = Dataset(x, y, ("a", "b"), "detection", 2)
    smap = sensitivity_scan(img, ds, eval_size=8)
    e = img.entries("weight")[0]
    expect = brute_force(img, ds, NO_EXITS, e.start, e.start + 40)
    np.testing.assert_allclose(smap.delta[e.start:e.start + 40], expect, atol=1e-9)


def test_scan_leaves_image_untouched():
    img = engine(CONV_SPEC, "logclip")
    digest = img.sha256()
    sensitivity_scan(img, labelled(img), ExitPolicy(0.5))
    assert img.sha256() == digest


def test_region_limits_scanned_bits():
    img = engine(DENSE_SPEC)
    smap = sensitivity_scan(img, labelled(img), region=(300, 340))
    assert smap.scanned.sum() == 40 * 8
    assert smap.scanned[300:340].all()
    with pytest.raises(ValueError):
        sensitivity_scan(img, labelled(img), region=(10, len(img) + 1))


def toy_map():
    delta = np.full((12, 8), np.nan)
    delta[4:12] = 0.0
    delta[4, 7] = 50.0
    delta[5, 0] = CRASH_DROP
    delta[10, 3] = CRASH_DROP - 0.5
    delta[11, 1] = 80.0
    owner = np.array([-1] * 4 + [0] * 4 + [1] * 4)
    parts = np.array(["header"] * 4 + ["weight"] * 8, dtype=object)
    return SensitivityMap(90.0, delta, np.zeros((12, 8), bool), owner, parts, page_size=8)


def test_sensitivity_map_counts():
    m = toy_map()
    assert m.layer_counts() == {-1: (0, 0), 0: (2, 32), 1: (1, 32)}
    # grid: 12 bytes in 8-byte pages -> 2 pages of 2 cells of 4 bytes
    grid = m.page_grid(cell_bytes=4)
    assert grid.tolist() == [[0, 2], [1, 0]]
    with pytest.raises(ValueError):
        m.page_grid(cell_bytes=3)


def test_sensitivity_csv(tmp_path):
    m = toy_map()
    n = m.write_csv(tmp_path / "bits.csv")
    rows = list(csv.DictReader(open(tmp_path / "bits.csv")))
    assert n == len(rows) == 64
    hit = [r for r in rows if r["offset"] == "4" and r["bit"] == "7"][0]
    assert hit["sensitive"] == "1" and hit["layer"] == "0" and float(hit["delta"]) == 50.0
    shape = m.write_page_grid(tmp_path / "grid.csv", 4)
    grid = list(csv.reader(open(tmp_path / "grid.csv")))
    assert shape == (2, 2) and len(grid) == 3 and len(grid[0]) == 3


def test_thirds_and_share():
    assert layer_thirds(6) == ([0, 1], [4, 5])
    assert layer_thirds(2) == ([0], [1])
    m = toy_map()
    assert sensitive_share(m, [0]) == pytest.approx(2 / 3)
    assert sensitive_share(m, [1]) == pytest.approx(1 / 3)
    m.delta[:] = 0.0
    assert sensitive_share(m, [0]) == 0.0


def test_select_sensitive_area_is_densest_window():
    img = engine(DENSE_SPEC)
    n = len(img)
    rng = np.random.default_rng(0)
    delta = np.where(rng.random((n, 8)) < 0.05, 20.0, 0.0)
    m = SensitivityMap(100.0, delta, np.zeros((n, 8), bool), img.owner_array(),
                       np.zeros(n, object))
    p0, p1 = img.parameter_range
    a, b = select_sensitive_area(m, img, size=64)
    assert b - a == 64 and p0 <= a and b <= p1
    per_byte = (delta[p0:p1] >= 10).sum(axis=1)
    best = max(per_byte[i:i + 64].sum() for i in range(p1 - p0 - 63))
    assert (delta[a:b] >= 10).sum() == best


def test_map_range_between_variants():
    relu, log = engine(DENSE_SPEC, "relu"), engine(DENSE_SPEC, "logclip")
    w = relu.entries("weight", layer=1)[0]
    a, b = map_range(relu, log, (w.start + 3, w.start + 20))
    t = log.entries("weight", layer=1)[0]
    assert (a, b) == (t.start + 3, t.start + 20)
    assert bytes(log.data[a:b]) != b"" and b - a == 17
    # a range straddling into a blob the other image places elsewhere fails
    last = relu.entries("bias", layer=2)[0]
    backbone_only = engine({**DENSE_SPEC, "internal_exits": []})
    with pytest.raises(ValueError):
        map_range(relu, backbone_only, (last.end - 2, last.end + 2))


def test_crash_threshold():
    assert is_crash(90.0, 80.0)
    assert not is_crash(90.0, 80.01)
    assert is_crash(90.0, 0.0)


def result_of(perfs, baseline=90.0):
    cfg = CampaignConfig(total_bits=5, rounds=len(perfs))
    rounds = [RoundResult(i, p, baseline - p, is_crash(baseline, p), 6.0, False, 1)
              for i, p in enumerate(perfs)]
    return CampaignResult(cfg, baseline, 6.0, rounds, "clean")


def test_crash_rate_and_summary(tmp_path):
    r = result_of([90.0, 70.0, 85.0, 80.0])
    assert crash_rate(r) == 0.5
    s = r.summary()
    assert (s["mean"], s["min"], s["max"]) == (81.25, 70.0, 90.0)
    r.write(tmp_path)
    rows = list(csv.reader(open(tmp_path / "rounds.csv")))
    assert rows[0] == ROUND_COLUMNS and len(rows) == 5
    assert json.loads((tmp_path / "summary.json").read_text())["crash_rate"] == 0.5
    with pytest.raises(ValueError):
        crash_rate(result_of([]))


def test_campaign_config_validation():
    with pytest.raises(ValueError):
        CampaignConfig(total_bits=0)
    with pytest.raises(ValueError):
        CampaignConfig(total_bits=5, area="sensitive")
    with pytest.raises(ValueError):
        CampaignConfig(total_bits=5, area="nowhere")
    with pytest.raises(ValueError):
        CampaignConfig(total_bits=5, roi_base=123)
    with pytest.raises(ValueError):
        CampaignConfig.from_dict({"total_bits": 5, "colour": "red"})
    c = CampaignConfig(total_bits=7, area="sensitive", sensitive_range=(10, 90), seed=4)
    assert CampaignConfig.from_dict(json.loads(json.dumps(c.to_dict()))) == c


def test_campaign_rounds_flip_exact_budget():
    img = engine(DENSE_SPEC)
    cfg = CampaignConfig(total_bits=20, rounds=5, seed=1)
    p0, p1 = img.parameter_range
    for r in range(cfg.rounds):
        _, plan = plan_round(img, cfg, r, ErrorModelConfig(), TOY)
        offs, bits = plan.flips()
        assert len(set(zip(offs.tolist(), bits.tolist()))) == 20
        assert ((offs >= p0) & (offs < p1)).all()


def test_campaign_deterministic_and_restores_image():
    img = engine(DENSE_SPEC, "logclip")
    ds = labelled(img, 40, policy=ExitPolicy(0.5))
    digest = img.sha256()
    cfg = CampaignConfig(total_bits=30, rounds=6, seed=9)
    a = run_campaign(img, ds, cfg, policy=ExitPolicy(0.5))
    b = run_campaign(img, ds, cfg, policy=ExitPolicy(0.5))
    assert img.sha256() == digest
    assert a.to_csv() == b.to_csv()
    assert len(a.rounds) == 6 and a.baseline == 100.0
    c = run_campaign(img, ds, CampaignConfig(total_bits=30, rounds=6, seed=10), policy=ExitPolicy(0.5))
    assert c.to_csv() != a.to_csv()


def test_campaign_round_matches_direct_evaluation():
    img = engine(DENSE_SPEC)
    ds = labelled(img, 40)
    cfg = CampaignConfig(total_bits=200, rounds=3, seed=2)
    res = run_campaign(img, ds, cfg)
    for r in res.rounds:
        _, plan = plan_round(img, cfg, r.round, ErrorModelConfig())
        data = bytearray(img.data)
        offs, bits = plan.flips()
        for o, b in zip(offs, bits):
            data[o] ^= 1 << int(b)
        try:
            perf = score_outputs(Runtime(deserialize(data)).forward(ds.x).outputs, ds)
        except EngineFormatError:
            perf = 0.0
        assert r.performance == perf


def test_sensitive_planning_failure_is_a_campaign_error():
    img = engine(DENSE_SPEC)
    p0 = img.parameter_range[0]
    cfg = CampaignConfig(total_bits=64, rounds=2, area="sensitive", sensitive_range=(p0, p0 + 2),
                         max_attempts=30)
    digest = img.sha256()
    with pytest.raises(CampaignError) as info:
        run_campaign(img, labelled(img), cfg)
    assert isinstance(info.value.__cause__, PlanningError)
    assert img.sha256() == digest


def test_cdf_deviation_examples():
    assert cdf_deviation([1, 2, 3], [1, 2, 3]) == 0.0
    assert cdf_deviation([1, 2, 3], [10, 11]) == 1.0
    assert cdf_deviation([1, 2, 3], [2, 3, 4]) == pytest.approx(1 / 3)
    # NaN outputs count as larger than every finite value
    assert cdf_deviation([0.0, 1.0], [0.0, np.nan]) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        cdf_deviation([], [1.0])


def test_layer_outputs_is_backbone_state():
    img = engine(DENSE_SPEC, "logclip")
    x = inputs(10)
    h = Runtime.of(img).layer(0, x)
    np.testing.assert_array_equal(layer_outputs(img, x, 1), h)
    assert layer_outputs(img, x, 3).shape == (10, 3)
