"""Inference-time machinery: galleries, retrieval, clip pooling,
species-range geolocation, group aggregation and the naive baseline."""

import csv
import struct
from dataclasses import dataclass

import numpy as np

from .encoders import read_embeddings_array, save_embeddings
from .errors import EmptyClipList, EmptyGallery, GalleryMismatch
from .geodesy import GeoCoordinate
from .rangemap import likelihood_map

RASTER_MAGIC = b"S2LR"
KMEANS_K = 5
KMEANS_ITERS = 50


@dataclass
class LocationGallery:
    lat: np.ndarray
    lon: np.ndarray
    emb: np.ndarray  # (n, d) unit rows
    kind: str = "custom"

    def __post_init__(self):
        if len(self.lat) == 0:
            raise EmptyGallery("gallery has no entries")

    def __len__(self):
        return len(self.lat)

    def coordinate(self, i):
        return GeoCoordinate(float(self.lat[i]), float(self.lon[i]))

    def save(self, csv_path, emb_path):
        with open(csv_path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["lat", "lon"])
            for a, b in zip(self.lat, self.lon):
                wr.writerow([repr(float(a)), repr(float(b))])
        save_embeddings(emb_path, ((i, 0, e) for i, e in enumerate(self.emb)), dim=self.emb.shape[1])

    @classmethod
    def load(cls, csv_path, emb_path, kind="custom"):
        with open(csv_path) as fh:
            rows = list(csv.DictReader(fh))
        _, _, emb = read_embeddings_array(emb_path)
        if len(rows) != len(emb):
            raise GalleryMismatch(f"{len(rows)} coordinates vs {len(emb)} embeddings")
        lat = np.array([float(r["lat"]) for r in rows])
        lon = np.array([float(r["lon"]) for r in rows])
        return cls(lat, lon, emb.astype(np.float64), kind)


def uniform_lattice(step_deg=1.0):
    lats = np.arange(-90.0, 90.0 + 1e-9, step_deg)
    lons = np.arange(-180.0, 180.0 - 1e-9, step_deg)
    LA, LO = np.meshgrid(lats, lons, indexing="ij")
    return LA.ravel(), LO.ravel()


def raster_lookup(mask, lat, lon):
    rows, cols = mask.shape
    r = np.clip(((90.0 - np.asarray(lat)) / 180.0 * rows).astype(int), 0, rows - 1)
    c = np.clip(((np.asarray(lon) + 180.0) / 360.0 * cols).astype(int), 0, cols - 1)
    return mask[r, c]


def build_gallery(kind, loc_encoder, step_deg=1.0, land_mask=None, locations=None, grid=None,
                  level=2):
    """Gallery of candidate locations.

    uniform   -- lattice with ``step_deg`` spacing
    land      -- uniform lattice filtered by a boolean raster
    dataset   -- the given training ``locations``
    neighbors -- ``step_deg`` lattice restricted to grid cells holding a location
    custom    -- the given ``locations`` verbatim
    """
    if step_deg <= 0:
        raise ValueError("step must be positive")
    if kind == "uniform":
        lat, lon = uniform_lattice(step_deg)
    elif kind == "land":
        if land_mask is None:
            raise ValueError("land gallery needs a land mask")
        lat, lon = uniform_lattice(step_deg)
        keep = raster_lookup(np.asarray(land_mask, dtype=bool), lat, lon)
        lat, lon = lat[keep], lon[keep]
    elif kind in ("dataset", "custom"):
        if locations is None or len(locations) == 0:
            raise EmptyGallery("dataset gallery needs training locations")
        loc = np.asarray(locations, dtype=np.float64).reshape(-1, 2)
        lat, lon = loc[:, 0], loc[:, 1]
    elif kind == "neighbors":
        if locations is None or grid is None or len(locations) == 0:
            raise EmptyGallery("neighbors gallery needs locations and a grid")
        loc = np.asarray(locations, dtype=np.float64).reshape(-1, 2)
        occupied = np.unique(grid.locate(level, loc[:, 0], loc[:, 1]))
        lat, lon = uniform_lattice(step_deg)
        keep = np.isin(grid.locate(level, lat, lon), occupied)
        lat, lon = lat[keep], lon[keep]
    else:
        raise ValueError(f"unknown gallery kind {kind!r}")
    if len(lat) == 0:
        raise EmptyGallery(f"{kind} gallery is empty")
    return LocationGallery(np.asarray(lat, float), np.asarray(lon, float),
                           loc_encoder.encode_many(lat, lon), kind)


def similarity(query, g):
    return g.emb @ np.asarray(query, dtype=np.float64)


def retrieve(query, g):
    """(coordinate, similarity map); ties go to the lowest gallery index."""
    sims = similarity(query, g)
    i = int(np.argmax(sims))
    return g.coordinate(i), sims


def retrieve_many(queries, g, chunk=512):
    """Index of the best gallery entry for each query row."""
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    out = np.empty(len(q), dtype=np.int64)
    for i in range(0, len(q), chunk):
        out[i:i + chunk] = np.argmax(q[i:i + chunk] @ g.emb.T, axis=1)
    return out


# -- pooling --------------------------------------------------------------

def _normalize(v):
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def kmeans(x, k, iters=KMEANS_ITERS):
    """Lloyd's algorithm initialised from the first ``k`` rows.

    Returns (centroids, assignment).  Ties in assignment go to the lower
    centroid index; empty clusters keep their centroid.
    """
    c = x[:k].copy()
    assign = None
    for _ in range(iters):
        d = ((x[:, None, :] - c[None, :, :]) ** 2).sum(axis=2)
        new = np.argmin(d, axis=1)
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        for j in range(k):
            members = x[assign == j]
            if len(members):
                c[j] = members.mean(axis=0)
    return c, assign


def pool_clips(clip_outputs, mode="average"):
    """Combine per-clip location embeddings into one unit vector."""
    x = np.asarray(clip_outputs, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if len(x) == 0:
        raise EmptyClipList("no clip outputs to pool")
    if len(x) == 1:
        return x[0].copy()
    if mode == "average":
        return _normalize(x.mean(axis=0))
    if mode == "max":
        return _normalize(x.max(axis=0))
    if mode == "cluster":
        # canonical order makes the result independent of input order
        order = np.lexsort(x.T[::-1])
        xs = x[order]
        k = min(KMEANS_K, len(xs))
        c, assign = kmeans(xs, k)
        sizes = np.bincount(assign, minlength=k)
        return _normalize(c[int(np.argmax(sizes))])
    raise ValueError(f"unknown pooling mode {mode!r}")


# -- species ranges -------------------------------------------------------

def species_range_geolocate(weights, model, lat, lon):
    """Argmax of the weighted species likelihood map over candidate points."""
    lat = np.atleast_1d(np.asarray(lat, dtype=float))
    if len(lat) == 0:
        raise ValueError("no candidate points")
    m = likelihood_map(model, weights, lat, lon)
    i = int(np.argmax(m))
    return GeoCoordinate(float(lat[i]), float(np.atleast_1d(lon)[i]))


# -- aggregation ----------------------------------------------------------

def aggregate_group(maps, g):
    """Average similarity maps over a group and decode one coordinate."""
    maps = [np.asarray(m, dtype=np.float64) for m in maps]
    if not maps:
        raise EmptyClipList("empty group")
    if any(len(m) != len(g) for m in maps):
        raise GalleryMismatch("similarity maps do not match the gallery size")
    mean = np.mean(maps, axis=0)
    return g.coordinate(int(np.argmax(mean)))


def group_keys(lat, lon, timestamps, grid, level, period="year"):
    """(cell id, period index) per recording; period in year / month / week."""
    cells = grid.locate(level, lat, lon)
    if period == "year":
        t = np.zeros(len(cells), dtype=np.int64)
    elif period == "month":
        t = np.array([int(ts[5:7]) for ts in timestamps])
    elif period == "week":
        import datetime as dt
        t = np.array([min(52, dt.date.fromisoformat(ts[:10]).isocalendar()[1]) for ts in timestamps])
    else:
        raise ValueError(f"unknown period {period!r}")
    return list(zip(cells.tolist(), t.tolist()))


def aggregate_predictions(queries, g, keys):
    """Gallery index decoded for each recording after grouping by key.

    Every member of a group receives the argmax of the group's mean
    similarity map.
    """
    q = np.asarray(queries, dtype=np.float64)
    groups = {}
    for i, k in enumerate(keys):
        groups.setdefault(k, []).append(i)
    out = np.empty(len(q), dtype=np.int64)
    for members in groups.values():
        maps = g.emb @ q[members].T  # (n_gallery, group size)
        out[members] = int(np.argmax(maps.mean(axis=1)))
    return out


# -- baseline -------------------------------------------------------------

def naive_baseline(train_locations, n, rng):
    """Random training locations, sampled with replacement."""
    loc = np.asarray(train_locations, dtype=np.float64).reshape(-1, 2)
    if len(loc) == 0:
        raise ValueError("no training locations")
    return loc[rng.integers(0, len(loc), size=n)]


# -- raster io ------------------------------------------------------------

def save_raster(path, mask):
    mask = np.asarray(mask, dtype=bool)
    bits = np.packbits(mask.ravel(), bitorder="little")
    with open(path, "wb") as fh:
        fh.write(RASTER_MAGIC + struct.pack("<II", *mask.shape) + bits.tobytes())


def load_raster(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != RASTER_MAGIC or len(raw) < 12:
        raise ValueError(f"{path}: not a land raster")
    rows, cols = struct.unpack("<II", raw[4:12])
    bits = np.frombuffer(raw, dtype=np.uint8, offset=12)
    if len(bits) != (rows * cols + 7) // 8:
        raise ValueError(f"{path}: truncated raster")
    return np.unpackbits(bits, bitorder="little")[:rows * cols].reshape(rows, cols).astype(bool)
