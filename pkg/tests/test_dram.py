import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from radflip import dram
from radflip.dram import (LPDDR4_8GB, SCALED, TOY, AddressBoundsError, CellCoord, DramConfig,
                          DramError, capacity, decode_address, decode_many, encode_cell,
                          encode_many, level_span, make_scheme, scheme_from_dict)

SCHEMES = ("S1", "S2", "S3")


def s1_address(row, rank, channel, bank, column, byte=0):
    # LPDDR4 S1 layout written out by hand: column a4..a10, bank a11..a13,
    # channel a14..a16, rank a17, row a18 and up
    return (row << 18) | (rank << 17) | (channel << 14) | (bank << 11) | (column << 4) | byte


def test_capacity_product():
    cfg = DramConfig(channels=8, ranks=1, banks=8, rows=1 << 15, columns=1 << 10,
                     dq_width=16, channel_width=8, burst_length=16)
    assert capacity(cfg) == 8 * 8 * (1 << 15) * (1 << 10) * 16


def test_capacity_unit_and_linearity():
    one = DramConfig(1, 1, 1, 1, 8, 1, 8, 1)
    assert capacity(one) // 8 == 1
    twice = DramConfig(2, 1, 1, 1, 8, 1, 8, 1)
    assert capacity(twice) == 2 * capacity(one)


def test_lpddr4_is_8_gib():
    assert LPDDR4_8GB.capacity_bytes == 8 << 30
    assert LPDDR4_8GB.offset_bits == 4


@pytest.mark.parametrize("bad", [
    dict(channels=3), dict(rows=0), dict(burst_length=6), dict(page_size=1000)])
def test_config_rejects_non_powers(bad):
    base = SCALED.to_dict()
    base.update(bad)
    with pytest.raises(DramError):
        DramConfig.from_dict(base)


def test_config_rejects_unknown_keys():
    with pytest.raises(DramError, match="unknown"):
        DramConfig.from_dict({**SCALED.to_dict(), "voltage": 1.1})


def test_s1_layout_fields():
    s = make_scheme(LPDDR4_8GB, "S1")
    got = {f.level: (f.lo, f.hi) for f in s.fields}
    assert got == {"column": (4, 10), "bank": (11, 13), "channel": (14, 16),
                   "rank": (17, 17), "row": (18, 32)}
    assert s.xor_functions == ()


@pytest.mark.parametrize("scheme", SCHEMES)
def test_zero_address(scheme):
    s = make_scheme(LPDDR4_8GB, scheme)
    assert decode_address(0, LPDDR4_8GB, s) == CellCoord(0, 0, 0, 0, 0, 0)
    assert encode_cell(CellCoord(0, 0, 0, 0, 0, 0), LPDDR4_8GB, s) == 0


@pytest.mark.parametrize("row,rank,channel,bank,column", [
    (0, 0, 0, 1, 0), (1, 0, 0, 0, 0), (12345, 1, 5, 3, 0), (32767, 1, 7, 7, 0), (7, 0, 2, 6, 64)])
def test_s1_golden_vectors(row, rank, channel, bank, column):
    s = make_scheme(LPDDR4_8GB, "S1")
    pa = s1_address(row, rank, channel, bank, column)
    assert decode_address(pa, LPDDR4_8GB, s) == CellCoord(row, column, channel, rank, bank, 0)


def test_bit_in_block_from_low_bits():
    s = make_scheme(LPDDR4_8GB, "S1")
    c = decode_address(s1_address(3, 0, 1, 2, 9, byte=13), LPDDR4_8GB, s, bit=5)
    assert c.bit_in_block == 13 * 8 + 5
    assert c.bit_in_byte == 5
    assert (c.row, c.column, c.channel, c.bank) == (3, 9, 1, 2)


def test_s2_bank_is_raw_xor_low_column():
    s = make_scheme(LPDDR4_8GB, "S2")
    for col in range(8):
        for raw_bank in range(8):
            pa = s1_address(5, 1, 3, raw_bank, col)
            c = decode_address(pa, LPDDR4_8GB, s)
            assert c.bank == raw_bank ^ col
            assert c.channel == 3


def test_s3_channel_is_raw_xor_low_column():
    s = make_scheme(LPDDR4_8GB, "S3")
    banks_seen = set()
    for col in range(8):
        c = decode_address(s1_address(5, 0, 6, 2, col), LPDDR4_8GB, s)
        assert c.channel == 6 ^ col
        assert c.bank == 2
        banks_seen.add(c.channel)
    assert len(banks_seen) == 8


def test_s2_low_column_bits_change_bank_s1_does_not():
    s1 = make_scheme(LPDDR4_8GB, "S1")
    s2 = make_scheme(LPDDR4_8GB, "S2")
    base = s1_address(100, 0, 0, 4, 0)
    banks1 = {decode_address(base + (c << 4), LPDDR4_8GB, s1).bank for c in range(8)}
    banks2 = {decode_address(base + (c << 4), LPDDR4_8GB, s2).bank for c in range(8)}
    assert banks1 == {4}
    assert len(banks2) == 8


def test_encode_undoes_xor():
    s = make_scheme(LPDDR4_8GB, "S3")
    cell = CellCoord(row=9, column=5, channel=1, rank=1, bank=7, bit_in_block=17)
    pa = encode_cell(cell, LPDDR4_8GB, s)
    raw_channel = (pa >> 14) & 7
    assert raw_channel == 1 ^ (5 & 7)
    assert decode_address(pa, LPDDR4_8GB, s, bit=cell.bit_in_byte) == cell


@pytest.mark.parametrize("scheme", SCHEMES)
def test_exhaustive_round_trip_scaled(scheme):
    s = make_scheme(SCALED, scheme)
    pa = np.arange(SCALED.capacity_bytes, dtype=np.int64)
    coords = decode_many(pa, SCALED, s)
    back = encode_many(coords, SCALED, s)
    # encode returns the block-aligned byte + bit_in_block/8
    assert np.array_equal(back, pa)
    assert np.array_equal(decode_many(back, SCALED, s), coords)
    # each cell home is unique
    keys = coords @ np.array([1 << 40, 1 << 30, 1 << 29, 1 << 28, 1 << 26, 1], dtype=np.int64)
    assert np.unique(keys).size == pa.size


@pytest.mark.parametrize("scheme", SCHEMES)
@given(pa=st.integers(0, LPDDR4_8GB.capacity_bytes - 1), bit=st.integers(0, 7))
def test_round_trip_lpddr4(scheme, pa, bit):
    s = make_scheme(LPDDR4_8GB, scheme)
    cell = decode_address(pa, LPDDR4_8GB, s, bit)
    assert encode_cell(cell, LPDDR4_8GB, s) == pa
    assert cell.bit_in_byte == bit


def test_bounds_errors():
    s = make_scheme(SCALED, "S1")
    with pytest.raises(AddressBoundsError):
        decode_address(SCALED.capacity_bytes, SCALED, s)
    with pytest.raises(AddressBoundsError):
        decode_address(-1, SCALED, s)
    with pytest.raises(AddressBoundsError):
        decode_address(0, SCALED, s, bit=8)
    with pytest.raises(AddressBoundsError):
        encode_cell(CellCoord(SCALED.rows, 0, 0, 0, 0, 0), SCALED, s)
    with pytest.raises(AddressBoundsError):
        encode_cell(CellCoord(0, 0, 0, 0, SCALED.banks, 0), SCALED, s)


def test_span_single_page_worked_example():
    sp = level_span(0, 4095, LPDDR4_8GB, make_scheme(LPDDR4_8GB, "S1"))
    assert sp.row == (0, 0)
    assert sp.count("column") == 2 ** 7
    assert sp.bank == (0, 1)
    assert sp.channel == (0, 0) and sp.rank == (0, 0)


@pytest.mark.parametrize("scheme", SCHEMES)
def test_span_singleton_and_whole_device(scheme):
    s = make_scheme(SCALED, scheme)
    pa = 0x12345
    sp = level_span(pa, pa, SCALED, s)
    c = decode_address(pa, SCALED, s)
    for level in dram.COORD_LEVELS:
        assert getattr(sp, level) == (getattr(c, level), getattr(c, level))
    assert level_span(0, SCALED.capacity_bytes - 1, SCALED, s) == dram.full_span(SCALED)


def test_span_rejects_inverted_range():
    with pytest.raises(ValueError):
        level_span(10, 9, SCALED, make_scheme(SCALED, "S1"))


@pytest.mark.parametrize("scheme", SCHEMES)
@given(a=st.integers(0, SCALED.capacity_bytes - 1), n=st.integers(0, 1 << 16))
def test_span_soundness(scheme, a, n):
    s = make_scheme(SCALED, scheme)
    b = min(a + n, SCALED.capacity_bytes - 1)
    sp = level_span(a, b, SCALED, s)
    coords = decode_many(np.arange(a, b + 1), SCALED, s)
    for j, level in enumerate(dram.COORD_LEVELS):
        lo, hi = getattr(sp, level)
        assert coords[:, j].min() >= lo and coords[:, j].max() <= hi
        if level in ("row", "column"):
            assert (coords[:, j].min(), coords[:, j].max()) == (lo, hi)


def test_scheme_rejects_overlap_and_gap():
    good = make_scheme(SCALED, "S1").to_dict()
    overlap = json.loads(json.dumps(good))
    overlap["fields"][1]["lo"] -= 1
    with pytest.raises(DramError):
        scheme_from_dict(overlap, SCALED)
    gap = json.loads(json.dumps(good))
    gap["fields"] = gap["fields"][:-1]
    with pytest.raises(DramError):
        scheme_from_dict(gap, SCALED)


def test_scheme_dict_round_trip():
    s = make_scheme(LPDDR4_8GB, "S2")
    again = scheme_from_dict(s.to_dict(), LPDDR4_8GB)
    assert again == s
    assert scheme_from_dict({"scheme": "s3"}, TOY) == make_scheme(TOY, "S3")


def test_unknown_scheme():
    with pytest.raises(DramError):
        make_scheme(SCALED, "S4")


def test_packaged_dram_configs_parse(tmp_path):
    std = tmp_path / "std.json"
    std.write_text(json.dumps(TOY.to_dict()))
    mp = tmp_path / "map.json"
    mp.write_text(json.dumps({"scheme": "S2"}))
    cfg = dram.load_dram_standard(std)
    assert cfg == TOY
    assert dram.load_dram_mapping(mp, cfg).scheme_id == "S2"
