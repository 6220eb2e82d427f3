"""Species presence model, checklists and checklist corruption."""

import json
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import UniformWeightsFallback
from .geodesy import EARTH_RADIUS_KM, to_unit_vectors

CHECKLIST_THRESHOLD = 0.1


@dataclass(frozen=True)
class RangeBump:
    lat: float
    lon: float
    sigma_km: float
    weight: float


class SyntheticRangeModel:
    """Per-species presence p_s(x) = max_b weight_b * exp(-d(x, c_b)^2 / (2 sigma_b^2))."""

    def __init__(self, species_bumps):
        self.bumps = [list(b) for b in species_bumps]
        if not self.bumps or any(not b for b in self.bumps):
            raise ValueError("every species needs at least one bump")
        flat = [(s, b) for s, bs in enumerate(self.bumps) for b in bs]
        self._species = np.array([s for s, _ in flat])
        self._centers = to_unit_vectors([b.lat for _, b in flat], [b.lon for _, b in flat])
        self._sigma = np.array([b.sigma_km for _, b in flat])
        self._weight = np.array([b.weight for _, b in flat])

    @property
    def n_species(self):
        return len(self.bumps)

    def presence_many(self, lat, lon, chunk=4096):
        """Presence scores, shape (n_points, n_species)."""
        lat = np.atleast_1d(np.asarray(lat, dtype=float))
        lon = np.atleast_1d(np.asarray(lon, dtype=float))
        out = np.zeros((len(lat), self.n_species))
        order = np.argsort(self._species, kind="stable")
        starts = np.searchsorted(self._species[order], np.arange(self.n_species))
        for i in range(0, len(lat), chunk):
            v = to_unit_vectors(lat[i:i + chunk], lon[i:i + chunk])
            # great-circle distance via atan2 of cross/dot for accuracy
            dot = v @ self._centers.T
            cross = np.sqrt(np.maximum(0.0, 1.0 - dot ** 2))
            d = EARTH_RADIUS_KM * np.arctan2(cross, dot)
            val = self._weight * np.exp(-d ** 2 / (2.0 * self._sigma ** 2))
            out[i:i + chunk] = np.maximum.reduceat(val[:, order], starts, axis=1)
        return out

    def to_json(self):
        return {str(s): [dict(lat=b.lat, lon=b.lon, sigma_km=b.sigma_km, weight=b.weight) for b in bs]
                for s, bs in enumerate(self.bumps)}

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, sort_keys=False)
            fh.write("\n")

    @classmethod
    def from_json(cls, obj):
        keys = sorted(obj, key=int)
        if [int(k) for k in keys] != list(range(len(keys))):
            raise ValueError("species ids must be 0..S-1")
        return cls([[RangeBump(float(b["lat"]), float(b["lon"]), float(b["sigma_km"]), float(b["weight"]))
                     for b in obj[k]] for k in keys])

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def presence_scores(m, p):
    return m.presence_many([p.lat_deg], [p.lon_deg])[0]


def oracle_checklist(scores, threshold=CHECKLIST_THRESHOLD):
    """Binarise presence scores; a score equal to the threshold counts as present."""
    return (np.asarray(scores) >= threshold).astype(np.uint8)


def containment_radius_km(sigma_km, weight, threshold=CHECKLIST_THRESHOLD):
    """Distance from a bump centre inside which the bump alone clears the threshold."""
    if weight < threshold:
        return -1.0
    return sigma_km * math.sqrt(2.0 * math.log(weight / threshold))


def corrupt_checklist(c, fraction, rng):
    """Drop floor(fraction * n_present) present species, chosen uniformly."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must be in [0, 1]")
    c = np.array(c, dtype=np.uint8)
    present = np.flatnonzero(c)
    # a full permutation keeps the drop order nested across fractions
    order = rng.permutation(present)
    c[order[:int(math.floor(fraction * len(present) + 1e-9))]] = 0
    return c


def keep_random_k(c, k, rng):
    if k < 0:
        raise ValueError("k must be non-negative")
    c = np.array(c, dtype=np.uint8)
    present = np.flatnonzero(c)
    if len(present) <= k:
        return c
    keep = rng.choice(present, size=k, replace=False)
    out = np.zeros_like(c)
    out[keep] = 1
    return out


def likelihood_map(m, weights, lat, lon):
    """Weighted mean of species presence maps at the given points."""
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (m.n_species,):
        raise ValueError(f"expected {m.n_species} weights, got {w.shape}")
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise ValueError("weights must be finite and non-negative")
    total = w.sum()
    if total <= 0:
        warnings.warn("all species weights are zero; using the unweighted mean map", UniformWeightsFallback)
        w = np.ones_like(w)
        total = w.sum()
    lat = np.atleast_1d(np.asarray(lat, dtype=float))
    lon = np.atleast_1d(np.asarray(lon, dtype=float))
    out = np.empty(len(lat))
    step = 2048
    for i in range(0, len(lat), step):
        out[i:i + step] = m.presence_many(lat[i:i + step], lon[i:i + step]) @ w / total
    return out
