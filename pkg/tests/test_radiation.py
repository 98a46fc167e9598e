import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from radflip.dram import SCALED, TOY, CellCoord
from radflip.radiation import (ErrorModelConfig, ModelError, compose_event_mix,
                               expected_daily_errors, grow_offsets, load_error_model, make_rng,
                               sample_cluster, sample_multiplicities, sample_multiplicity)

DEFAULT = ErrorModelConfig()
REF = CellCoord(row=40, column=60, channel=1, rank=0, bank=2, bit_in_block=77)


def connected(cells):
    cells = {(c.row, c.column) for c in cells}
    start = next(iter(cells))
    seen, todo = {start}, [start]
    while todo:
        r, c = todo.pop()
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                n = (r + dr, c + dc)
                if n in cells and n not in seen:
                    seen.add(n)
                    todo.append(n)
    return seen == cells


def test_default_pmf_masses():
    pmf = DEFAULT.multiplicity_pmf
    assert pmf[2] == pytest.approx(0.12)
    assert pmf[3] == pytest.approx(0.02)
    assert sum(v for k, v in pmf.items() if k > 3) == pytest.approx(0.01)
    assert pmf[1] == pytest.approx(0.85)
    assert set(pmf) == set(range(1, 9))


@pytest.mark.parametrize("kwargs", [
    dict(multiplicity_pmf={1: 0.5, 2: 0.4}),
    dict(multiplicity_pmf={9: 1.0}),
    dict(multiplicity_pmf={0: 1.0}),
    dict(multiplicity_pmf={1: 1.2, 2: -0.2}),
    dict(wordline_prob=0.7, bitline_prob=0.2),
    dict(max_col_extent=2, multiplicity_pmf={8: 1.0}),
])
def test_invalid_models(kwargs):
    with pytest.raises(ModelError):
        ErrorModelConfig(**kwargs)


def test_json_round_trip(tmp_path):
    p = tmp_path / "em.json"
    p.write_text(json.dumps(DEFAULT.to_dict()))
    assert load_error_model(p) == DEFAULT
    with pytest.raises(ModelError):
        ErrorModelConfig.from_dict({"multiplicity": {}})


@pytest.mark.parametrize("size", [1, 8])
def test_degenerate_pmf(size):
    m = ErrorModelConfig({size: 1.0})
    rng = make_rng(3)
    assert {sample_multiplicity(m, rng) for _ in range(200)} == {size}


def test_multiplicity_frequencies():
    sizes = sample_multiplicities(DEFAULT, make_rng(11), 100_000)
    p = {k: np.mean(sizes == k) for k in range(1, 9)}
    assert abs(p[2] - 0.12) <= 0.01
    assert abs(p[3] - 0.02) <= 0.005
    assert abs(sum(p[k] for k in range(4, 9)) - 0.01) <= 0.005


def test_single_cell_cluster_is_reference():
    cl = sample_cluster(REF, 1, DEFAULT, SCALED, make_rng(0))
    assert cl.cells == (REF,)
    assert cl.multiplicity == 1


def test_forced_wordline_pair():
    m = ErrorModelConfig(wordline_prob=1.0, bitline_prob=0.0)
    for seed in range(50):
        a, b = sample_cluster(REF, 2, m, SCALED, make_rng(seed)).cells
        assert a.row == b.row
        assert abs(a.column - b.column) == 1


def test_forced_bitline_pair_changes_row():
    m = ErrorModelConfig(wordline_prob=0.0, bitline_prob=1.0)
    for seed in range(50):
        a, b = sample_cluster(REF, 2, m, SCALED, make_rng(seed)).cells
        assert abs(a.row - b.row) == 1
        assert abs(a.column - b.column) <= 1


def test_wordline_ratio_two_cell():
    n = 100_000
    rng = make_rng(5)
    rows = rng.integers(0, SCALED.rows, n)
    cols = rng.integers(0, SCALED.column_slots, n)
    offs, ok = grow_offsets(np.full(n, 2), DEFAULT, rng, rows, cols, SCALED)
    # only a reference in the last row and last column has no neighbour
    corner = (rows == SCALED.rows - 1) & (cols == SCALED.column_slots - 1)
    assert np.array_equal(~ok, corner)
    same_row = np.mean(offs[ok, 1, 0] == offs[ok, 0, 0])
    assert abs(100 * same_row - 80) <= 2


@given(size=st.integers(1, 8), seed=st.integers(0, 2**32 - 1),
       row=st.integers(0, TOY.rows - 1), col=st.integers(0, TOY.column_slots - 1))
def test_cluster_invariants(size, seed, row, col):
    ref = CellCoord(row, col, 1, 0, 3, 5)
    room = min(2, TOY.rows - row) * min(5, TOY.column_slots - col)
    if size > room:
        with pytest.raises(ModelError):
            sample_cluster(ref, size, DEFAULT, TOY, make_rng(seed))
        return
    cl = sample_cluster(ref, size, DEFAULT, TOY, make_rng(seed))
    cells = cl.cells
    assert len(set(cells)) == size
    rows = {c.row for c in cells}
    cols = [c.column for c in cells]
    assert max(rows) - min(rows) <= 1
    assert max(cols) - min(cols) <= 4
    assert all((c.channel, c.rank, c.bank, c.bit_in_block) == (1, 0, 3, 5) for c in cells)
    assert all(0 <= c.row < TOY.rows and 0 <= c.column < TOY.column_slots for c in cells)
    assert connected(cells)


def test_cluster_box_anchored_at_reference():
    # away from device edges the growth box starts at the reference cell
    for seed in range(300):
        cl = sample_cluster(REF, 8, DEFAULT, SCALED, make_rng(seed))
        assert {c.row for c in cl.cells} <= {REF.row, REF.row + 1}
        assert all(REF.column <= c.column <= REF.column + 4 for c in cl.cells)


def test_edge_reference_stays_in_device():
    edge = CellCoord(SCALED.rows - 1, SCALED.column_slots - 5, 0, 0, 0, 0)
    for seed in range(100):
        cl = sample_cluster(edge, 5, DEFAULT, SCALED, make_rng(seed))
        assert all(c.row < SCALED.rows and c.column < SCALED.column_slots for c in cl.cells)
        assert len(set(cl.cells)) == 5
    corner = CellCoord(SCALED.rows - 1, SCALED.column_slots - 1, 0, 0, 0, 0)
    with pytest.raises(ModelError):
        sample_cluster(corner, 2, DEFAULT, SCALED, make_rng(0))


def test_unreachable_multiplicity():
    with pytest.raises(ModelError):
        sample_cluster(REF, 11, DEFAULT, SCALED, make_rng(0))
    with pytest.raises(ModelError):
        sample_cluster(REF, 0, DEFAULT, SCALED, make_rng(0))


def test_cluster_determinism():
    a = sample_cluster(REF, 6, DEFAULT, SCALED, make_rng(99))
    b = sample_cluster(REF, 6, DEFAULT, SCALED, make_rng(99))
    assert a == b


def test_event_mix_trivial():
    assert compose_event_mix(1, DEFAULT, make_rng(0)).cluster_sizes == (1,)
    only_ones = ErrorModelConfig({1: 1.0})
    assert compose_event_mix(5, only_ones, make_rng(0)).cluster_sizes == (1, 1, 1, 1, 1)
    with pytest.raises(ValueError):
        compose_event_mix(0, DEFAULT, make_rng(0))


@given(total=st.integers(1, 600), seed=st.integers(0, 2**32 - 1))
def test_event_mix_sums_to_budget(total, seed):
    mix = compose_event_mix(total, DEFAULT, make_rng(seed))
    assert mix.total_bits == total
    assert set(mix.cluster_sizes) <= set(DEFAULT.multiplicity_pmf)


def test_event_mix_frequencies_follow_pmf():
    rng = make_rng(1)
    counts = {}
    for _ in range(400):
        for k, v in compose_event_mix(200, DEFAULT, rng).histogram().items():
            counts[k] = counts.get(k, 0) + v
    n = sum(counts.values())
    # the remainder fill adds a few extra singles per mix
    assert abs(counts[2] / n - 0.12) < 0.01
    assert abs(counts[3] / n - 0.02) < 0.005


def test_event_mix_determinism():
    a = compose_event_mix(200, DEFAULT, make_rng(42))
    b = compose_event_mix(200, DEFAULT, make_rng(42))
    assert a == b


def test_daily_errors():
    assert expected_daily_errors(40 * 8 * 2**20, 4.76e-7) == pytest.approx(159.7, abs=0.1)
    assert expected_daily_errors(0) == 0
    assert expected_daily_errors(1, 1) == 1
    with pytest.raises(ValueError):
        expected_daily_errors(-1)
