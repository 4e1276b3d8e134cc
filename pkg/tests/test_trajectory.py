import io
from collections import Counter

import pytest
from hypothesis import given, settings, strategies as st

from reachgrid.tilegrid import TileId, latlon_to_tile
from reachgrid.trajectory import (GpsRecord, ObservationWindow, TilePath, TileVisit, format_mm,
                                  haversine_m, parse_mm, parse_tdrive_file, parse_timestamp,
                                  read_dump, read_tdrive_dir, segment, to_tile_path, write_dump)


def parse(text):
    c = Counter()
    return parse_tdrive_file(io.BytesIO(text.encode()), c), c


def rec(mover, t, lat=39.9, lon=116.4):
    return GpsRecord(mover, t, lat, lon, latlon_to_tile(lat, lon))


def test_parse_sample_line():
    recs, c = parse("1,2008-02-02 15:36:08,116.51172,39.92123\n")
    assert c == {"parsed": 1}
    (r,) = recs
    assert r.mover_id == "1" and r.lon == 116.51172 and r.lat == 39.92123
    assert r.tile == latlon_to_tile(39.92123, 116.51172)
    # 15:36:08 in Beijing is 07:36:08 UTC
    assert r.timestamp == 1201937768


def test_parse_timestamp_fixed_offset():
    assert parse_timestamp("1970-01-01 08:00:00") == 0


def test_out_of_range_lon_skipped():
    recs, c = parse("1,2008-02-02 15:36:08,999.0,39.9\n")
    assert recs == [] and c["skipped"] == 1


def test_empty_file():
    recs, c = parse("")
    assert recs == [] and sum(c.values()) == 0


@pytest.mark.parametrize("line", [
    "1,2008-02-02 15:36:08,116.5\n",
    "1,2008-02-02T15:36:08,116.5,39.9\n",
    "1,2008-13-02 15:36:08,116.5,39.9\n",
    ",2008-02-02 15:36:08,116.5,39.9\n",
    "1,2008-02-02 15:36:08,abc,39.9\n",
    "\n",
])
def test_malformed_lines_skipped(line):
    recs, c = parse(line)
    assert recs == [] and c["skipped"] == 1


@settings(max_examples=50)
@given(st.lists(st.sampled_from([
    "3,2008-02-03 01:02:03,116.4,39.9",
    "3,2008-02-03 01:02:04,116.40001,39.90001",
    "garbage",
    "3,2008-02-03 01:02:05,200,39.9",
    "",
]), max_size=30))
def test_line_counts_conserved(lines):
    text = "".join(line + "\n" for line in lines)
    recs, c = parse(text)
    assert c["parsed"] + c["skipped"] == len(lines)
    assert len(recs) == c["parsed"]


def test_unreadable_directory():
    with pytest.raises(NotADirectoryError):
        read_tdrive_dir("/nonexistent/dir")


def test_segment_close_records_form_one_trajectory():
    out = segment([rec("a", 0), rec("a", 10)], gap_s=300)
    assert len(out) == 1 and len(out[0].records) == 2


def test_segment_drops_singletons():
    assert segment([rec("a", 0), rec("a", 600)], gap_s=300) == []


def test_segment_two_hour_hole():
    rs = [rec("a", t) for t in (0, 5, 10, 7210, 7215)]
    out = segment(rs, gap_s=300)
    assert [len(t.records) for t in out] == [3, 2]
    assert [t.id for t in out] == ["a_00000", "a_00001"]


def test_segment_splits_on_tile_jump():
    rs = [rec("a", 0, lon=116.4), rec("a", 5, lon=116.4), rec("a", 10, lon=116.5), rec("a", 15, lon=116.5)]
    assert len(segment(rs, jump_tiles=2000)) == 2
    assert len(segment(rs, jump_tiles=10**7)) == 1


def test_segment_collapses_duplicate_timestamps_and_movers():
    rs = [rec("a", 0), rec("a", 0, lat=39.91), rec("a", 5), rec("b", 6), rec("b", 7)]
    out = segment(rs)
    assert [len(t.records) for t in out] == [2, 2]
    assert out[0].records[0].lat == 39.9
    for t in out:
        ts = [r.timestamp for r in t.records]
        assert ts == sorted(set(ts))


record_lists = st.lists(
    st.builds(lambda m, t, dlat: rec(m, t, lat=39.9 + dlat),
              st.sampled_from(["a", "b", "c"]), st.integers(0, 5000), st.floats(-0.05, 0.05)),
    max_size=60)


@settings(max_examples=100)
@given(record_lists, st.integers(10, 600), st.integers(1, 5000))
def test_segment_idempotent(records, gap, jump):
    first = segment(records, gap, jump)
    flat = [r for t in first for r in t.records]
    again = segment(flat, gap, jump)
    assert [(t.id, t.records) for t in again] == [(t.id, t.records) for t in first]
    for t in first:
        assert len(t.records) >= 2


def test_haversine_meridian():
    # arc length R * dphi for 0.001 degree along a meridian (40-digit evaluation)
    assert haversine_m(39.9, 116.4, 39.901, 116.4) == pytest.approx(111.1950802335329, abs=1e-6)


def test_tile_path_single_tile():
    rs = [rec("a", t) for t in (0, 5, 10)]
    (t,) = segment(rs)
    p = to_tile_path(t)
    assert len(p) == 1 and p.visits[0].timestamp == 0 and p.visits[0].cum_mm == 0


def test_tile_path_keeps_first_entry():
    a = rec("a", 0)
    a2 = rec("a", 5, lat=39.9 + 1e-7)
    assert a2.tile == a.tile
    b = rec("a", 9, lat=39.90005)
    p = to_tile_path(segment([a, a2, b])[0])
    assert p.tiles == [a.tile, b.tile]
    assert [v.timestamp for v in p] == [0, 9]
    expected = haversine_m(a.lat, a.lon, a2.lat, a2.lon) + haversine_m(a2.lat, a2.lon, b.lat, b.lon)
    assert p.visits[1].cum_mm == round(expected * 1000)


def test_tile_path_length_of_small_step():
    p = to_tile_path(segment([rec("a", 0), rec("a", 10, lat=39.901)])[0])
    assert p.visits[1].cum_m == pytest.approx(111.2, abs=0.5)


@settings(max_examples=50)
@given(record_lists)
def test_tile_path_has_no_repeats(records):
    for t in segment(records):
        tiles = to_tile_path(t).tiles
        assert all(u != v for u, v in zip(tiles, tiles[1:]))


@given(st.integers(0, 10**12))
def test_mm_text_roundtrip(mm):
    assert parse_mm(format_mm(mm)) == mm


def test_dump_roundtrip_sorted():
    p2 = TilePath("b_00000", [TileVisit(TileId(1, 2), 10, 0), TileVisit(TileId(1, 3), 15, 1234)])
    p1 = TilePath("a_00000", [TileVisit(TileId(9, 9), 5, 0), TileVisit(TileId(8, 9), 7, 5)])
    buf = io.StringIO()
    assert write_dump([p2, p1], buf) == 4
    text = buf.getvalue()
    assert text.splitlines()[0] == "a_00000\t5\t9\t9\t0.000"
    assert text.splitlines()[3] == "b_00000\t15\t1\t3\t1.234"
    back = read_dump(io.StringIO(text))
    assert back == [p1, p2]


def test_window():
    w = ObservationWindow(100, 50)
    assert w.contains(100) and w.contains(150) and not w.contains(151)
    with pytest.raises(ValueError):
        ObservationWindow(0, 0)


def test_synthetic_directory_parses(tdrive_small):
    c = Counter()
    recs = read_tdrive_dir(tdrive_small, c)
    assert c["parsed"] == 1000 and c["skipped"] == 0
    assert recs == sorted(recs, key=lambda r: (r.mover_id, r.timestamp))
    trajs = segment(recs)
    assert trajs and all(len(t.records) >= 2 for t in trajs)
