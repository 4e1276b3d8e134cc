import random

import pytest
from hypothesis import given, settings, strategies as st

from reachgrid.tilegrid import (N_TILES, TileId, TileRangeError, chebyshev, latlon_to_tile,
                                latlon_to_tile_arrays, neighborhood, quadkey_order, quadkey_to_tile,
                                quadkeys_from_arrays, tile_center_latlon, tile_to_quadkey)

import numpy as np

coord = st.integers(0, N_TILES - 1)
tiles = st.builds(TileId, coord, coord)


def test_origin_maps_to_grid_midpoint():
    assert latlon_to_tile(0.0, 0.0) == TileId(8388608, 8388608)


def test_beijing_longitude_on_equator():
    # x = floor((116.397 + 180) / 360 * 2**24), checked with 50-digit arithmetic
    assert latlon_to_tile(0.0, 116.3970) == TileId(13813101, 8388608)


@pytest.mark.parametrize("lat,lon", [(85.06, 0.0), (-85.06, 0.0), (0.0, 180.0), (0.0, -180.1),
                                     (float("nan"), 0.0)])
def test_out_of_range_rejected(lat, lon):
    with pytest.raises(TileRangeError):
        latlon_to_tile(lat, lon)


def test_edges_clamped():
    assert latlon_to_tile(85.05112878, -180.0) == TileId(0, 0)
    t = latlon_to_tile(-85.05112878, 179.9999999999)
    assert t.y == N_TILES - 1 and t.x == N_TILES - 1


def test_tile_bounds_checked():
    with pytest.raises(TileRangeError):
        TileId(N_TILES, 0)
    with pytest.raises(TileRangeError):
        TileId(0, -1)


def test_ordering_is_row_major():
    assert TileId(5, 1) < TileId(0, 2)
    assert sorted([TileId(1, 1), TileId(0, 1), TileId(9, 0)]) == [TileId(9, 0), TileId(0, 1), TileId(1, 1)]


def test_quadkey_examples():
    assert tile_to_quadkey(TileId(0, 0)) == "0" * 24
    assert tile_to_quadkey(TileId(8388608, 8388608)) == "3" + "0" * 23
    assert tile_to_quadkey(TileId(1, 0)) == "0" * 23 + "1"
    assert tile_to_quadkey(TileId(0, 1)) == "0" * 23 + "2"


@pytest.mark.parametrize("bad", ["", "0" * 23, "0" * 23 + "4", "0" * 25])
def test_bad_quadkeys(bad):
    with pytest.raises(ValueError):
        quadkey_to_tile(bad)


@given(tiles)
def test_quadkey_roundtrip(t):
    assert quadkey_to_tile(tile_to_quadkey(t)) == t


@given(tiles)
def test_center_roundtrip(t):
    lat, lon = tile_center_latlon(t)
    assert latlon_to_tile(lat, lon) == t


@given(st.floats(-85.0, 85.0), st.floats(-180.0, 179.99), st.floats(0, 1e-3), st.floats(0, 1e-3))
def test_monotone(lat, lon, dlat, dlon):
    a = latlon_to_tile(lat, lon)
    b = latlon_to_tile(lat, min(lon + dlon, 179.999))
    c = latlon_to_tile(min(lat + dlat, 85.0), lon)
    assert b.x >= a.x
    assert c.y <= a.y


@settings(max_examples=50)
@given(st.lists(tiles, min_size=1, max_size=50))
def test_vector_quadkeys_match_scalar(ts):
    x = np.array([t.x for t in ts])
    y = np.array([t.y for t in ts])
    assert [q.decode() for q in quadkeys_from_arrays(x, y)] == [tile_to_quadkey(t) for t in ts]
    order = np.argsort(quadkey_order(x, y), kind="stable")
    assert [tile_to_quadkey(ts[i]) for i in order] == sorted(tile_to_quadkey(t) for t in ts)


def test_vector_latlon_matches_scalar():
    rng = random.Random(4)
    lat = [rng.uniform(-85, 85) for _ in range(500)] + [90.0, 0.0]
    lon = [rng.uniform(-180, 180) for _ in range(500)] + [0.0, 181.0]
    x, y, ok = latlon_to_tile_arrays(np.array(lat), np.array(lon))
    for i in range(500):
        assert ok[i]
        assert TileId(int(x[i]), int(y[i])) == latlon_to_tile(lat[i], lon[i])
    assert not ok[500] and not ok[501]


@pytest.mark.parametrize("a,b,d", [((10, 10), (10, 10), 0), ((10, 10), (13, 8), 3),
                                   ((0, 0), (N_TILES - 1, 0), N_TILES - 1)])
def test_chebyshev(a, b, d):
    assert chebyshev(TileId(*a), TileId(*b)) == d


@pytest.mark.parametrize("r,n", [(1, 9), (12, 625), (3, 49)])
def test_neighborhood_interior_size(r, n):
    s = TileId(1000, 1000)
    nb = neighborhood(s, r)
    assert len(nb) == n
    assert s in nb
    assert nb == sorted(nb)  # (dy, dx) raster order is row-major order
    assert all(chebyshev(s, t) <= r for t in nb)


def test_neighborhood_clipped_at_corner():
    assert neighborhood(TileId(0, 0), 1) == [TileId(0, 0), TileId(1, 0), TileId(0, 1), TileId(1, 1)]
    assert len(neighborhood(TileId(N_TILES - 1, N_TILES - 1), 2)) == 9


def test_neighborhood_needs_positive_radius():
    with pytest.raises(ValueError):
        neighborhood(TileId(5, 5), 0)


@given(st.integers(100, 10_000), st.integers(100, 10_000), st.integers(-6, 6), st.integers(-6, 6),
       st.integers(1, 5))
def test_neighborhood_symmetric(x, y, dx, dy, r):
    s, t = TileId(x, y), TileId(x + dx, y + dy)
    assert (t in neighborhood(s, r)) == (s in neighborhood(t, r))
