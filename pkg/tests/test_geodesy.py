import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from audiogeo.errors import InvalidCoordinate, InvalidGridSpec, InvalidLevel
from audiogeo.geodesy import (EARTH_AREA_KM2, GeoCoordinate, build_grid, cell_of, destination, from_unit_vectors,
                              haversine_km, haversine_np, to_unit_vectors, wrap_coordinate)

from conftest import random_points
from oracles import great_circle_mp, law_of_cosines_mp

lats = st.floats(-90, 90, allow_nan=False)
lons = st.floats(-180, 180, exclude_max=True, allow_nan=False)


def test_named_distances():
    assert haversine_km(GeoCoordinate(10, 20), GeoCoordinate(10, 20)) == 0.0
    assert haversine_km(GeoCoordinate(0, 0), GeoCoordinate(0, -180)) == pytest.approx(20015.087, abs=0.01)
    assert haversine_km(GeoCoordinate(0, 0), GeoCoordinate(0, -180)) == pytest.approx(math.pi * 6371.0, rel=1e-15)
    bp = haversine_km(GeoCoordinate(52.52, 13.405), GeoCoordinate(48.8566, 2.3522))
    assert bp == pytest.approx(law_of_cosines_mp(52.52, 13.405, 48.8566, 2.3522), abs=1e-6)
    assert bp == pytest.approx(877.46, abs=0.01)


def test_haversine_against_oracle(rng):
    la1, lo1 = random_points(rng, 2000)
    la2, lo2 = random_points(rng, 2000)
    d = haversine_np(la1, lo1, la2, lo2)
    ref = np.array([great_circle_mp(*args) for args in zip(la1, lo1, la2, lo2)])
    assert np.max(np.abs(d - ref) / np.maximum(ref, 1e-300)) <= 1e-9


def test_haversine_short_distances_precise():
    # 1 m apart: law-of-cosines in doubles would fail here, haversine must not
    d = haversine_np(10.0, 20.0, 10.0 + 1e-3 / 111.195, 20.0)
    ref = great_circle_mp(10.0, 20.0, 10.0 + 1e-3 / 111.195, 20.0)
    assert abs(d - ref) / ref < 1e-9


@settings(max_examples=200, deadline=None)
@given(lats, lons, lats, lons)
def test_haversine_symmetric_and_bounded(a, b, c, d):
    x = haversine_np(a, b, c, d)
    assert x == haversine_np(c, d, a, b)
    assert 0.0 <= x <= math.pi * 6371.0 + 1e-9


def test_triangle_inequality(rng):
    la, lo = random_points(rng, 30000)
    a, b, c = (slice(0, 10000), slice(10000, 20000), slice(20000, 30000))
    ab = haversine_np(la[a], lo[a], la[b], lo[b])
    bc = haversine_np(la[b], lo[b], la[c], lo[c])
    ac = haversine_np(la[a], lo[a], la[c], lo[c])
    assert np.all(ac <= ab + bc + 1e-9)


@pytest.mark.parametrize("raw,expected", [((45, 190), (45, -170)), ((95, 0), (90, 0)), ((0, -180), (0, -180)),
                                          ((-100, 540), (-90, -180)), ((10, 180), (10, -180))])
def test_wrap_coordinate(raw, expected):
    p = wrap_coordinate(*raw)
    assert (p.lat_deg, p.lon_deg) == expected


def test_wrap_rejects_non_finite():
    with pytest.raises(InvalidCoordinate):
        wrap_coordinate(float("nan"), 0)
    with pytest.raises(InvalidCoordinate):
        wrap_coordinate(0, float("inf"))


@settings(max_examples=300, deadline=None)
@given(st.floats(-1e6, 1e6), st.floats(-1e6, 1e6))
def test_wrap_always_valid(lat, lon):
    p = wrap_coordinate(lat, lon)
    assert -90 <= p.lat_deg <= 90 and -180 <= p.lon_deg < 180


def test_coordinate_validation():
    with pytest.raises(InvalidCoordinate):
        GeoCoordinate(91, 0)
    with pytest.raises(InvalidCoordinate):
        GeoCoordinate(0, 180)
    GeoCoordinate(-90, -180)


def test_unit_vector_round_trip(rng):
    la, lo = random_points(rng, 1000)
    la2, lo2 = from_unit_vectors(to_unit_vectors(la, lo))
    assert np.allclose(la, la2, atol=1e-9)
    assert np.all(haversine_np(la, lo, la2, lo2) < 1e-6)


def test_destination_distance(rng):
    la, lo = random_points(rng, 500)
    bearing = rng.uniform(0, 360, 500)
    dist = rng.uniform(0, 5000, 500)
    la2, lo2 = destination(la, lo, bearing, dist)
    assert np.allclose(haversine_np(la, lo, la2, lo2), dist, atol=1e-6)


# -- grid -------------------------------------------------------------------

def test_classification_grid_counts(grid):
    counts = [grid.n_cells(L) for L in range(3)]
    expect = [EARTH_AREA_KM2 / a for a in (4.36e6, 6.1e5, 9.0e4)]  # ~117 / ~836 / ~5667
    assert counts == [116, 928, 5568]
    for c, e in zip(counts, expect):
        assert 0.8 * e <= c <= 1.2 * e


@pytest.mark.parametrize("targets", [(4.36e6, 6.1e5, 9.0e4), (253.0, 36.0)])
def test_all_cell_areas_within_tolerance(targets):
    g = build_grid(list(targets))
    for L, t in enumerate(targets):
        a = g.cell_areas(L)
        assert a.min() >= 0.8 * t and a.max() <= 1.2 * t
        assert a.sum() == pytest.approx(EARTH_AREA_KM2, rel=1e-9)


def test_half_earth_gives_hemispheres():
    g = build_grid([2.55e8])
    assert g.n_cells(0) == 2
    lat, lon = g.centers(0)
    assert np.allclose(lat, 0) and np.allclose(lon, [-90, 90])


@pytest.mark.parametrize("targets", [[6.1e5, 4.36e6], [1e5, 1e5], [3e8], [-5.0]])
def test_bad_grid_specs(targets):
    with pytest.raises(InvalidGridSpec):
        build_grid(targets)


def test_center_containment(grid):
    for L in range(3):
        lat, lon = grid.centers(L)
        assert np.array_equal(grid.locate(L, lat, lon), np.arange(grid.n_cells(L)))


def test_child_centres_in_parent(grid):
    for L in range(1, 3):
        lat, lon = grid.centers(L)
        ids = np.arange(grid.n_cells(L))
        assert np.array_equal(grid.locate(L - 1, lat, lon), grid.parents(L, ids))


def test_children_inverse_of_parent(grid):
    for L in range(2):
        seen = []
        for c in range(grid.n_cells(L)):
            kids = grid.children(L, c)
            assert all(grid.parent(L + 1, k) == c for k in kids)
            seen.extend(kids)
        assert sorted(seen) == list(range(grid.n_cells(L + 1)))


def test_partition_and_nesting_random_points(grid, rng):
    la, lo = random_points(rng, 100000)
    cells = [grid.locate(L, la, lo) for L in range(3)]
    for L in range(3):
        lat0, lat1, lon0, lon1 = grid.cell_bounds(L, cells[L])
        inside = (la >= lat0 - 1e-9) & (la <= lat1 + 1e-9) & (lo >= lon0 - 1e-9) & (lo <= lon1 + 1e-9)
        assert inside.all()
    for L in range(1, 3):
        assert np.array_equal(grid.parents(L, cells[L]), cells[L - 1])


def test_points_within_circumradius(grid, rng):
    la, lo = random_points(rng, 10000)
    for L in range(3):
        c = grid.locate(L, la, lo)
        clat, clon = grid.centers(L, c)
        assert np.all(haversine_np(la, lo, clat, clon) <= grid.circumradius(L) + 1e-9)


def test_boundary_ties_go_to_lower_id(grid):
    lat0, lat1, lon0, lon1 = grid.cell_bounds(2, [100])
    # a point on the shared eastern edge belongs to this (lower) cell
    assert grid.locate(2, (lat0[0] + lat1[0]) / 2, lon1[0])[0] == 100
    # lon -180 belongs to the first cell of its band
    first = grid.locate(2, (lat0[0] + lat1[0]) / 2, -180.0)[0]
    lat_a, lat_b, lo_a, _ = grid.cell_bounds(2, [first])
    assert lo_a[0] == -180.0


def test_poles_locate(grid):
    assert grid.cell_bounds(0, grid.locate(0, 90.0, 0.0))[1][0] == 90.0
    assert grid.cell_bounds(0, grid.locate(0, -90.0, 0.0))[0][0] == -90.0


def test_cell_of_and_errors(grid):
    c = cell_of(grid, 1, GeoCoordinate(48.85, 2.35))
    assert c.level == 1 and haversine_km(c.center, GeoCoordinate(48.85, 2.35)) <= grid.circumradius(1)
    with pytest.raises(InvalidLevel):
        grid.locate(3, 0.0, 0.0)
    with pytest.raises(InvalidLevel):
        grid.parent(0, 0)


def test_grid_csv(tmp_path):
    g = build_grid([2.55e8, 4.36e6])
    g.to_csv(tmp_path / "g.csv")
    rows = (tmp_path / "g.csv").read_text().splitlines()
    assert rows[0] == "level,cell_id,center_lat,center_lon,area_km2"
    assert len(rows) == 1 + g.n_cells(0) + g.n_cells(1)
