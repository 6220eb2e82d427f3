"""Coordinates, great-circle distance and a nested equal-area global grid.

The grid is a latitude-band partition: each level is a stack of bands
(intervals of z = sin(lat)) and every band is cut into equal longitude arcs.
Because area on the sphere is R^2 * dz * dlon, equal dz and equal dlon give
exactly equal cell areas.  Finer levels split every band into ``m`` sub-bands
and every arc into ``k`` sub-arcs, so nesting holds by construction.
"""

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidCoordinate, InvalidGridSpec, InvalidLevel

EARTH_RADIUS_KM = 6371.0
EARTH_AREA_KM2 = 4.0 * math.pi * EARTH_RADIUS_KM ** 2


@dataclass(frozen=True)
class GeoCoordinate:
    lat_deg: float
    lon_deg: float

    def __post_init__(self):
        lat, lon = self.lat_deg, self.lon_deg
        if not (math.isfinite(lat) and math.isfinite(lon)):
            raise InvalidCoordinate(f"non-finite coordinate ({lat}, {lon})")
        if not -90.0 <= lat <= 90.0:
            raise InvalidCoordinate(f"latitude {lat} outside [-90, 90]")
        if not -180.0 <= lon < 180.0:
            raise InvalidCoordinate(f"longitude {lon} outside [-180, 180)")

    def __iter__(self):
        yield self.lat_deg
        yield self.lon_deg


def haversine_np(lat1, lon1, lat2, lon2, radius=EARTH_RADIUS_KM):
    """Vectorised haversine distance in km; inputs in degrees, broadcastable."""
    p1 = np.radians(lat1)
    p2 = np.radians(lat2)
    dp = p2 - p1
    dl = np.radians(np.asarray(lon2, dtype=float) - np.asarray(lon1, dtype=float))
    a = np.sin(dp / 2) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dl / 2) ** 2
    a = np.clip(a, 0.0, 1.0)
    return 2.0 * radius * np.arcsin(np.sqrt(a))


def haversine_km(a, b):
    """Great-circle distance between two coordinates (R = 6371.0 km)."""
    return float(haversine_np(a.lat_deg, a.lon_deg, b.lat_deg, b.lon_deg))


def wrap_lon(lon):
    return (np.asarray(lon, dtype=float) + 180.0) % 360.0 - 180.0


def wrap_coordinate(lat_raw, lon_raw):
    """Clamp latitude and wrap longitude into [-180, 180)."""
    if not (math.isfinite(lat_raw) and math.isfinite(lon_raw)):
        raise InvalidCoordinate(f"non-finite coordinate ({lat_raw}, {lon_raw})")
    lat = min(90.0, max(-90.0, float(lat_raw)))
    lon = float(wrap_lon(lon_raw))
    if lon >= 180.0:  # float rounding of values just below -180
        lon -= 360.0
    return GeoCoordinate(lat, lon)


def to_unit_vectors(lat_deg, lon_deg):
    lat = np.radians(np.asarray(lat_deg, dtype=float))
    lon = np.radians(np.asarray(lon_deg, dtype=float))
    return np.stack([np.cos(lat) * np.cos(lon), np.cos(lat) * np.sin(lon), np.sin(lat)], axis=-1)


def from_unit_vectors(v):
    v = np.asarray(v, dtype=float)
    lat = np.degrees(np.arctan2(v[..., 2], np.hypot(v[..., 0], v[..., 1])))
    lon = wrap_lon(np.degrees(np.arctan2(v[..., 1], v[..., 0])))
    return lat, lon


def destination(lat_deg, lon_deg, bearing_deg, dist_km):
    """Point reached travelling ``dist_km`` from a start point along a bearing."""
    p1 = np.radians(lat_deg)
    l1 = np.radians(lon_deg)
    b = np.radians(bearing_deg)
    d = np.asarray(dist_km, dtype=float) / EARTH_RADIUS_KM
    p2 = np.arcsin(np.clip(np.sin(p1) * np.cos(d) + np.cos(p1) * np.sin(d) * np.cos(b), -1, 1))
    l2 = l1 + np.arctan2(np.sin(b) * np.sin(d) * np.cos(p1), np.cos(d) - np.sin(p1) * np.sin(p2))
    return np.degrees(p2), wrap_lon(np.degrees(l2))


def sample_sphere(rng, n):
    """Area-uniform random points, returned as (lat, lon) arrays in degrees."""
    z = rng.uniform(-1.0, 1.0, n)
    lon = rng.uniform(-180.0, 180.0, n)
    return np.degrees(np.arcsin(z)), lon


# ---------------------------------------------------------------- grid ----


@dataclass(frozen=True)
class GridCell:
    level: int
    cell_id: int
    center: GeoCoordinate
    area_km2: float


@dataclass
class _Level:
    target_km2: float
    z_lo: np.ndarray        # per band
    z_hi: np.ndarray
    n_cells: np.ndarray     # cells per band
    first_id: np.ndarray    # id of the band's first cell
    # splitting of each parent band (empty at level 0)
    split_m: np.ndarray = None
    split_k: np.ndarray = None
    child_band0: np.ndarray = None  # on the *parent* level: first child band
    parent_band: np.ndarray = None

    @property
    def total(self):
        return int(self.first_id[-1] + self.n_cells[-1])


def _band_centroid_lat(z0, z1, dlon):
    """Latitude (deg) of the area centroid direction of a band cell."""
    # integral of sqrt(1-z^2) dz
    def F(z):
        return 0.5 * (z * np.sqrt(np.clip(1 - z * z, 0, None)) + np.arcsin(z))

    horiz = (F(z1) - F(z0)) * 2.0 * np.sin(dlon / 2.0)
    vert = 0.5 * (z1 * z1 - z0 * z0) * dlon
    lat = np.degrees(np.arctan2(vert, horiz))
    lo, hi = np.degrees(np.arcsin(z0)), np.degrees(np.arcsin(z1))
    mid = np.degrees(np.arcsin(0.5 * (z0 + z1)))
    inside = (lat > lo) & (lat < hi) | ((hi >= 90.0) & (lat >= 90.0)) | ((lo <= -90.0) & (lat <= -90.0))
    return np.where(inside, lat, mid)


class HierarchicalGrid:
    """Nested equal-area grid; levels go from coarse (0) to fine."""

    def __init__(self, levels):
        self._levels = levels
        self.levels = [lv.target_km2 for lv in levels]
        self._radius_cache = {}

    @property
    def n_levels(self):
        return len(self._levels)

    def _check(self, level):
        if not 0 <= level < len(self._levels):
            raise InvalidLevel(f"level {level} not in [0, {len(self._levels)})")
        return self._levels[level]

    def n_cells(self, level):
        return self._check(level).total

    # -- per-cell geometry -------------------------------------------------
    def _band_of_ids(self, level, ids):
        lv = self._check(level)
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= lv.total):
            raise InvalidLevel(f"cell id out of range at level {level}")
        band = np.searchsorted(lv.first_id, ids, side="right") - 1
        return lv, band, ids - lv.first_id[band]

    def cell_bounds(self, level, ids):
        """(lat_lo, lat_hi, lon_lo, lon_hi) arrays in degrees."""
        lv, band, j = self._band_of_ids(level, ids)
        w = 360.0 / lv.n_cells[band]
        lon_lo = -180.0 + j * w
        return (np.degrees(np.arcsin(lv.z_lo[band])), np.degrees(np.arcsin(lv.z_hi[band])),
                lon_lo, lon_lo + w)

    def cell_areas(self, level, ids=None):
        lv = self._check(level)
        if ids is None:
            ids = np.arange(lv.total)
        lv, band, _ = self._band_of_ids(level, ids)
        dz = lv.z_hi[band] - lv.z_lo[band]
        return EARTH_RADIUS_KM ** 2 * dz * (2 * math.pi / lv.n_cells[band])

    def centers(self, level, ids=None):
        """Area-centroid centers (lat, lon) in degrees."""
        lv = self._check(level)
        if ids is None:
            ids = np.arange(lv.total)
        lv, band, j = self._band_of_ids(level, ids)
        dlon = 2 * math.pi / lv.n_cells[band]
        lat = _band_centroid_lat(lv.z_lo[band], lv.z_hi[band], dlon)
        lon = -180.0 + (j + 0.5) * np.degrees(dlon)
        return lat, lon

    def cell(self, level, cell_id):
        lat, lon = self.centers(level, [cell_id])
        area = self.cell_areas(level, [cell_id])[0]
        return GridCell(level, int(cell_id), GeoCoordinate(float(lat[0]), float(lon[0])), float(area))

    def cells(self, level):
        """All cells of a level as GridCell objects (use only on coarse levels)."""
        lat, lon = self.centers(level)
        areas = self.cell_areas(level)
        return [GridCell(level, i, GeoCoordinate(float(a), float(b)), float(c))
                for i, (a, b, c) in enumerate(zip(lat, lon, areas))]

    def parent(self, level, cell_id):
        """Id of the containing cell at ``level - 1``."""
        return int(self.parents(level, [cell_id])[0])

    def parents(self, level, ids):
        if level == 0:
            raise InvalidLevel("level 0 cells have no parent")
        lv, band, j = self._band_of_ids(level, ids)
        up = self._levels[level - 1]
        pband = lv.parent_band[band]
        return up.first_id[pband] + j // lv.split_k[pband]

    def children(self, level, cell_id):
        """Ids at ``level + 1`` contained in the given cell."""
        if level + 1 >= self.n_levels:
            raise InvalidLevel(f"level {level} is the finest level")
        up, band, j = self._band_of_ids(level, [cell_id])
        b, j = int(band[0]), int(j[0])
        lv = self._levels[level + 1]
        m, k = int(lv.split_m[b]), int(lv.split_k[b])
        out = []
        for sb in range(int(up.child_band0[b]), int(up.child_band0[b]) + m):
            out.extend(range(int(lv.first_id[sb]) + j * k, int(lv.first_id[sb]) + (j + 1) * k))
        return out

    # -- point location ----------------------------------------------------
    def locate(self, level, lat, lon):
        """Vectorised cell lookup; returns int64 ids at ``level``.

        Descends from level 0 so that child/parent consistency is exact.
        Points on a boundary go to the lower-index cell; lon -180 belongs to
        the first cell of its band.
        """
        self._check(level)
        lat = np.atleast_1d(np.asarray(lat, dtype=float))
        lon = np.atleast_1d(np.asarray(lon, dtype=float))
        z = np.sin(np.radians(lat))
        z = np.where(lat >= 90.0, 1.0, np.where(lat <= -90.0, -1.0, z))
        x = lon + 180.0

        lv = self._levels[0]
        edges = np.append(lv.z_lo, lv.z_hi[-1])
        band = np.clip(np.searchsorted(edges, z, side="left") - 1, 0, len(lv.z_lo) - 1)
        n = lv.n_cells[band]
        w = 360.0 / n
        j = np.clip(np.ceil(x / w).astype(np.int64) - 1, 0, n - 1)
        lon0 = j * w
        for L in range(1, level + 1):
            child = self._levels[L]
            m = child.split_m[band]
            k = child.split_k[band]
            z0, z1 = lv.z_lo[band], lv.z_hi[band]
            sub = np.clip(np.ceil((z - z0) / ((z1 - z0) / m)).astype(np.int64) - 1, 0, m - 1)
            wk = w / k
            arc = np.clip(np.ceil((x - lon0) / wk).astype(np.int64) - 1, 0, k - 1)
            band = lv.child_band0[band] + sub
            j = j * k + arc
            lon0 = lon0 + arc * wk
            w = wk
            lv = child
        return lv.first_id[band] + j

    def cell_of(self, level, p):
        cid = int(self.locate(level, p.lat_deg, p.lon_deg)[0])
        return self.cell(level, cid)

    # -- diagnostics -------------------------------------------------------
    def circumradius(self, level, samples=64):
        """Max distance (km) from any cell center to its boundary.

        Cells within a band are rotations of one another, so one cell per
        band is sampled.
        """
        if level in self._radius_cache:
            return self._radius_cache[level]
        lv = self._check(level)
        worst = 0.0
        t = np.linspace(0.0, 1.0, samples)
        for b in range(len(lv.z_lo)):
            cid = int(lv.first_id[b])
            clat, clon = self.centers(level, [cid])
            la0, la1, lo0, lo1 = [float(v[0]) for v in self.cell_bounds(level, [cid])]
            lats = np.concatenate([np.full(samples, la0), np.full(samples, la1),
                                   la0 + (la1 - la0) * t, la0 + (la1 - la0) * t])
            lons = np.concatenate([lo0 + (lo1 - lo0) * t, lo0 + (lo1 - lo0) * t,
                                   np.full(samples, lo0), np.full(samples, lo1)])
            worst = max(worst, float(haversine_np(clat[0], clon[0], lats, lons).max()))
        self._radius_cache[level] = worst
        return worst

    def to_csv(self, path, levels=None):
        """Write level, cell_id, center_lat, center_lon, area_km2 rows."""
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["level", "cell_id", "center_lat", "center_lon", "area_km2"])
            for L in (range(self.n_levels) if levels is None else levels):
                lat, lon = self.centers(L)
                area = self.cell_areas(L)
                for i in range(len(lat)):
                    wr.writerow([L, i, f"{lat[i]:.6f}", f"{lon[i]:.6f}", f"{area[i]:.3f}"])


def _base_level(target):
    side = math.sqrt(target) / EARTH_RADIUS_KM
    n_bands = max(1, int(round(math.pi / side)))
    lat_edges = np.linspace(-math.pi / 2, math.pi / 2, n_bands + 1)
    band_area = 2 * math.pi * EARTH_RADIUS_KM ** 2 * np.diff(np.sin(lat_edges))
    n = np.maximum(1, np.rint(band_area / target)).astype(np.int64)
    dz = 2.0 * n / n.sum()
    z = np.concatenate([[-1.0], -1.0 + np.cumsum(dz)])
    z[-1] = 1.0
    first = np.concatenate([[0], np.cumsum(n)[:-1]])
    return _Level(target, z[:-1].copy(), z[1:].copy(), n, first)


def _choose_split(cell_area, target, dlat, width):
    ratio = cell_area / target
    top = int(math.ceil(ratio * 1.25)) + 1
    best = None
    for m in range(1, top + 1):
        for k in range(1, top + 1):
            rel = cell_area / (m * k) / target
            if not 0.8 <= rel <= 1.2:
                continue
            score = abs(math.log((dlat / m) / max(width / k, 1e-12))) + 10.0 * abs(math.log(rel))
            if best is None or score < best[0] - 1e-12:
                best = (score, m, k)
    if best is None:
        # no integer split lands in tolerance; take the closest product
        mk = max(1, int(round(ratio)))
        return 1, mk
    return best[1], best[2]


def _refine(parent, target):
    ms, ks = [], []
    for b in range(len(parent.z_lo)):
        z0, z1, n = parent.z_lo[b], parent.z_hi[b], int(parent.n_cells[b])
        area = EARTH_RADIUS_KM ** 2 * (z1 - z0) * 2 * math.pi / n
        la0, la1 = math.asin(z0), math.asin(z1)
        width = 2 * math.pi / n * math.cos(0.5 * (la0 + la1))
        m, k = _choose_split(area, target, la1 - la0, width)
        ms.append(m)
        ks.append(k)
    ms = np.array(ms, dtype=np.int64)
    ks = np.array(ks, dtype=np.int64)
    z_lo, z_hi, n_cells, pband = [], [], [], []
    child0 = np.zeros(len(ms), dtype=np.int64)
    for b in range(len(ms)):
        child0[b] = len(z_lo)
        z0, z1 = parent.z_lo[b], parent.z_hi[b]
        edges = z0 + (z1 - z0) * np.arange(ms[b] + 1) / ms[b]
        edges[0], edges[-1] = z0, z1
        for s in range(ms[b]):
            z_lo.append(edges[s])
            z_hi.append(edges[s + 1])
            n_cells.append(parent.n_cells[b] * ks[b])
            pband.append(b)
    parent.child_band0 = child0
    n_cells = np.array(n_cells, dtype=np.int64)
    first = np.concatenate([[0], np.cumsum(n_cells)[:-1]])
    return _Level(target, np.array(z_lo), np.array(z_hi), n_cells, first,
                  split_m=ms, split_k=ks, parent_band=np.array(pband, dtype=np.int64))


def build_grid(target_areas_km2):
    """Build a nested grid whose level ``i`` cells average ``target_areas_km2[i]``."""
    targets = [float(a) for a in target_areas_km2]
    if not targets:
        raise InvalidGridSpec("at least one level is required")
    if any(not math.isfinite(a) or a <= 0 for a in targets):
        raise InvalidGridSpec("areas must be positive and finite")
    if any(b >= a for a, b in zip(targets, targets[1:])):
        raise InvalidGridSpec("target areas must be strictly decreasing")
    if targets[0] > EARTH_AREA_KM2 / 2 * (1 + 1e-6):
        raise InvalidGridSpec("coarsest area exceeds half the Earth's surface")
    levels = [_base_level(targets[0])]
    for t in targets[1:]:
        levels.append(_refine(levels[-1], t))
    return HierarchicalGrid(levels)


def cell_of(grid, level, p):
    return grid.cell_of(level, p)


# default classification levels (mean areas of the three coarsest hex resolutions)
CLASSIFICATION_AREAS_KM2 = (4.36e6, 6.1e5, 9.0e4)
# aggregation neighbourhoods
AGGREGATION_AREAS_KM2 = {"cell253": 253.0, "cell36": 36.0}
