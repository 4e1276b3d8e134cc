import math
import random

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from reachgrid.summary import (ABSORPTION, EMISSION, SparseAccumulator, TrajArrays, accumulate,
                               dense_tensors, events_kernel, extract_events, global_maxima,
                               lar_raster, normalize, normalize_tensor)
from reachgrid.tilegrid import TileId
from reachgrid.trajectory import ObservationWindow

from conftest import random_paths
from oracles import brute_force_summaries, summaries_as_table


def test_single_adjacent_event(path_factory):
    p = path_factory("t", [(10, 10), (11, 10)])
    (e,) = extract_events(p, r=12, tau_s=600, h_max=16)
    assert (e.src, e.dst, e.hop_chebyshev, e.elapsed_s) == (TileId(10, 10), TileId(11, 10), 1, 5)
    assert e.path_m == 2.0 and e.ordinal == 0


def test_far_pair_excluded(path_factory):
    assert extract_events(path_factory("t", [(0, 0), (30, 0)]), r=12) == []


def test_multi_hop(path_factory):
    p = path_factory("t", [(0, 0), (1, 0), (2, 0)])
    pairs = {(e.src.x, e.dst.x) for e in extract_events(p, r=12, tau_s=600, h_max=2)}
    assert pairs == {(0, 1), (1, 2), (0, 2)}
    assert {(e.src.x, e.dst.x) for e in extract_events(p, r=12, h_max=1)} == {(0, 1), (1, 2)}


def test_tau_limits_pairs(path_factory):
    p = path_factory("t", [(0, 0), (1, 0), (2, 0)], step_s=400)
    assert len(extract_events(p, r=12, tau_s=600, h_max=2)) == 2


def test_return_to_start_is_not_an_event(path_factory):
    p = path_factory("t", [(0, 0), (1, 0), (0, 0)])
    evs = extract_events(p, r=5, h_max=2)
    assert all(e.src != e.dst for e in evs) and len(evs) == 2


def test_emission_absorption_placement(path_factory):
    r = 3
    p = path_factory("t", [(10, 10), (12, 9)])
    sums = accumulate(extract_events(p, r), r)
    a, b = TileId(10, 10), TileId(12, 9)
    # emission into B from offset A - B = (-2, +1) -> pixel (i=1+r, j=-2+r)
    assert sums[b].count[1 + r, -2 + r, EMISSION] == 1
    # absorption out of A towards offset B - A = (+2, -1)
    assert sums[a].count[-1 + r, 2 + r, ABSORPTION] == 1
    assert sums[a].count[..., EMISSION].sum() == 0 and sums[b].count[..., ABSORPTION].sum() == 0


def test_mean_of_two_events(path_factory):
    p1 = path_factory("a", [(0, 0), (1, 0)], step_s=4)
    p2 = path_factory("b", [(0, 0), (1, 0)], step_s=6)
    r = 2
    sums = accumulate(extract_events(p1, r) + extract_events(p2, r), r)
    raw = sums[TileId(0, 0)].raw_tensor()
    assert raw[r, r + 1, 3] == 2
    assert raw[r, r + 1, 5] == 5.0


def test_untouched_tile_absent(path_factory):
    sums = accumulate(extract_events(path_factory("t", [(0, 0), (1, 0)]), 2), 2)
    assert TileId(5, 5) not in sums


def test_accumulate_rejects_out_of_window(path_factory):
    evs = extract_events(path_factory("t", [(0, 0), (3, 0)]), r=5)
    with pytest.raises(ValueError):
        accumulate(evs, r=2)


def test_normalize_examples():
    z = np.zeros((5, 5, 6))
    assert not normalize_tensor(z, [5, 1, 1, 5, 1, 1]).any()
    raw = np.zeros((3, 3, 6))
    raw[0, 0, 0] = 5
    raw[0, 1, 0] = 1
    raw[0, 2, 0] = 3
    out = normalize_tensor(raw, [5, 0, 0, 0, 0, 0])
    assert out[0, 0, 0] == 1.0
    # log1p(1)/log1p(5) and log1p(3)/log1p(5), 30-digit evaluation
    assert out[0, 1, 0] == pytest.approx(0.386852807234541586870246138468, rel=1e-7)
    assert out[0, 2, 0] == pytest.approx(0.773705614469083173740492276936, rel=1e-7)
    with pytest.raises(ValueError):
        normalize_tensor(raw, [1] * 6, scheme="minmax")


def test_normalize_summary_in_unit_range():
    rng = random.Random(2)
    sums = accumulate([e for p in random_paths(rng) for e in extract_events(p, 4, 3000, 3)], 4)
    m = global_maxima(sums.values())
    for s in sums.values():
        t = normalize(s, maxima=m).tensor
        assert t.dtype == np.float32
        assert t.min() >= 0 and t.max() <= 1
        # means vanish where counts vanish
        for d in (0, 1):
            zero = s.count[..., d] == 0
            assert not t[..., 3 * d + 1][zero].any() and not t[..., 3 * d + 2][zero].any()
    assert max(normalize(s, maxima=m).tensor[..., 0].max() for s in sums.values()) == 1.0


def case_params(seed):
    rng = random.Random(seed)
    return (random_paths(rng, n_paths=rng.randint(1, 10)), rng.randint(1, 4),
            rng.choice([30, 120, 600, 10**6]), rng.randint(1, 3))


@pytest.mark.parametrize("seed", range(25))
def test_both_routes_match_brute_force(seed):
    paths, r, tau, h = case_params(seed)
    oracle = brute_force_summaries(paths, r, tau, h)
    ref = accumulate([e for p in paths for e in extract_events(p, r, tau, h)], r)
    assert summaries_as_table(ref, r) == oracle
    acc = events_kernel(TrajArrays.from_paths(paths), r, tau, h)
    assert summaries_as_table(acc.to_summaries(), r) == oracle


def test_conservation_and_center():
    rng = random.Random(8)
    paths = random_paths(rng, n_paths=10)
    evs = [e for p in paths for e in extract_events(p, 4, 10**6, 3)]
    sums = accumulate(evs, 4)
    em = sum(int(s.count[..., EMISSION].sum()) for s in sums.values())
    ab = sum(int(s.count[..., ABSORPTION].sum()) for s in sums.values())
    assert em == ab == len(evs)
    for s in sums.values():
        assert not s.count[4, 4].any()
    acc = events_kernel(TrajArrays.from_paths(paths), 4, 10**6, 3)
    assert acc.totals() == (len(evs), len(evs)) and acc.n_events == len(evs)


def test_straight_line_directionality(path_factory):
    r = 4
    p = path_factory("t", [(x, 50) for x in range(100, 120)])
    sums = accumulate(extract_events(p, r, h_max=16), r)
    for x in range(105, 115):
        s = sums[TileId(x, 50)]
        em = np.argwhere(s.count[..., EMISSION])
        ab = np.argwhere(s.count[..., ABSORPTION])
        # moving east: arrivals come from the west (j < r), departures go east
        assert len(em) and len(ab)
        assert (em[:, 1] < r).all() and (ab[:, 1] > r).all()
        assert (em[:, 0] == r).all() and (ab[:, 0] == r).all()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6), st.randoms())
def test_kernel_permutation_invariant(seed, rnd):
    rng = random.Random(seed)
    paths = random_paths(rng, n_paths=8)
    shuffled = list(paths)
    rnd.shuffle(shuffled)
    a = events_kernel(TrajArrays.from_paths(paths), 3, 600, 3)
    b = events_kernel(TrajArrays.from_paths(shuffled), 3, 600, 3)
    for name in ("key", "count", "sum_mm", "sum_s"):
        assert np.array_equal(getattr(a, name), getattr(b, name))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 6))
def test_partial_merge_equals_whole(seed, parts):
    rng = random.Random(seed)
    arr = TrajArrays.from_paths(random_paths(rng, n_paths=12))
    whole = events_kernel(arr, 3, 600, 4)
    pieces = [events_kernel(p, 3, 600, 4) for p in arr.split(parts)]
    merged = SparseAccumulator.merge(pieces[::-1])
    for name in ("key", "count", "sum_mm", "sum_s"):
        assert np.array_equal(getattr(whole, name), getattr(merged, name))
    assert merged.n_events == whole.n_events


def test_split_covers_everything():
    rng = random.Random(1)
    arr = TrajArrays.from_paths(random_paths(rng, n_paths=7))
    for parts in (1, 2, 3, 7, 12):
        chunks = arr.split(parts)
        assert len(chunks) == parts
        assert sum(c.n_paths for c in chunks) == 7
        assert np.array_equal(np.concatenate([c.x for c in chunks]), arr.x)


def test_dense_tensors_match_reference_normalization():
    rng = random.Random(3)
    paths = random_paths(rng)
    r = 3
    ref = accumulate([e for p in paths for e in extract_events(p, r, 600, 3)], r)
    acc = events_kernel(TrajArrays.from_paths(paths), r, 600, 3)
    m = acc.maxima()
    assert np.array_equal(m, global_maxima(ref.values()))
    by_tile = acc.to_summaries()
    from reachgrid.summary import morton_decode
    for morton, tensors in dense_tensors(acc, m):
        xs, ys = morton_decode(morton)
        for x, y, t in zip(xs, ys, tensors):
            expected = normalize(ref[TileId(int(x), int(y))], maxima=m).tensor
            np.testing.assert_allclose(t, expected, rtol=0, atol=1e-7)
            assert TileId(int(x), int(y)) in by_tile


def test_shard_by_block():
    paths = [
        __import__("conftest").make_path("a", [(10, 10), (11, 10)]),
        __import__("conftest").make_path("b", [(300, 10), (301, 10)]),
        __import__("conftest").make_path("c", [(255, 10), (256, 10)]),
    ]
    acc = events_kernel(TrajArrays.from_paths(paths), 2, 600, 2)
    shards = acc.shard()
    assert len(shards) == 2  # blocks x // 256 in {0, 1}, same y block
    assert sum(len(s) for s in shards.values()) == len(acc)
    assert sum(s.n_events for s in shards.values()) == acc.n_events


def test_lar_examples(path_factory):
    a = path_factory("a", [(0, 0), (1, 0)], step_s=10, step_mm=20_000)
    b = path_factory("b", [(5, 5), (0, 0), (2, 2)])
    lar = lar_raster([a])
    assert lar.record_count[TileId(0, 0)] == 1 and lar.trajectory_count[TileId(0, 0)] == 1
    assert lar.raw(TileId(0, 0))[2] == pytest.approx(2.0)
    lar2 = lar_raster([a, b])
    assert lar2.trajectory_count[TileId(0, 0)] == 2
    assert TileId(9, 9) not in lar2.record_count
    norm = lar2.normalized()
    assert all(((v >= 0) & (v <= 1)).all() for v in norm.values())


def test_lar_window(path_factory):
    a = path_factory("a", [(0, 0), (1, 0), (2, 0)], t0=100, step_s=10)
    lar = lar_raster([a], ObservationWindow(105, 10))
    assert list(lar.record_count) == [TileId(1, 0)]


def test_lar_ignores_neighbours(path_factory):
    a = path_factory("a", [(0, 0), (1, 0)])
    b = path_factory("b", [(0, 0), (1, 0), (2, 0), (3, 0)])
    # adding visits elsewhere never changes the counts of tile (0, 0)
    assert lar_raster([a]).record_count[TileId(0, 0)] == lar_raster([path_factory("a", [(0, 0), (9, 9)])]).record_count[TileId(0, 0)]
    assert lar_raster([b]).raw(TileId(0, 0))[:2].tolist() == [1, 1]


def test_frozen_ratio_independent():
    mpmath = pytest.importorskip("mpmath")
    mpmath.mp.dps = 40
    assert float(mpmath.log1p(1) / mpmath.log1p(5)) == pytest.approx(0.386852807234541586870246138468, rel=1e-15)
    assert float(mpmath.log1p(3) / mpmath.log1p(5)) == pytest.approx(0.773705614469083173740492276936, rel=1e-15)
