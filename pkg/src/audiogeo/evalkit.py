"""Geolocation metrics, error CDFs, per-cell error maps and the
species-rich (dawn chorus) manifest filter."""

import csv
import datetime as dt
import json
from dataclasses import dataclass, asdict

import numpy as np

from .errors import LengthMismatch, ManifestFieldError
from .geodesy import haversine_np

THRESHOLDS_KM = (25.0, 200.0, 750.0, 2500.0)
LABELS = {25.0: "city", 200.0: "region", 750.0: "country", 2500.0: "continent"}


def lower_median(x):
    """Median that is always an observed value (lower middle for even n)."""
    s = np.sort(np.asarray(x, dtype=np.float64))
    return float(s[(len(s) - 1) // 2])


@dataclass
class MetricsReport:
    median_km: float
    acc_25: float
    acc_200: float
    acc_750: float
    acc_2500: float
    n: int = 0

    def accuracies(self):
        return [self.acc_25, self.acc_200, self.acc_750, self.acc_2500]

    @property
    def region(self):
        return self.acc_200

    @property
    def country(self):
        return self.acc_750

    @property
    def continent(self):
        return self.acc_2500

    def to_dict(self):
        d = asdict(self)
        return {("acc@" + k[4:] if k.startswith("acc_") else k): v for k, v in d.items()}


def _pairs(pred, truth):
    p = _arr(pred)
    t = _arr(truth)
    if len(p) != len(t):
        raise LengthMismatch(f"{len(p)} predictions vs {len(t)} ground-truth points")
    if len(p) == 0:
        raise LengthMismatch("no predictions")
    return p, t


def _arr(x):
    if isinstance(x, np.ndarray):
        return np.asarray(x, dtype=np.float64).reshape(-1, 2)
    return np.array([[c.lat_deg, c.lon_deg] for c in x], dtype=np.float64).reshape(-1, 2)


def errors_km(pred, truth):
    p, t = _pairs(pred, truth)
    return haversine_np(p[:, 0], p[:, 1], t[:, 0], t[:, 1])


def metrics_from_errors(err):
    err = np.asarray(err, dtype=np.float64)
    if len(err) == 0:
        raise LengthMismatch("no errors")
    acc = [float(np.mean(err <= t)) for t in THRESHOLDS_KM]
    return MetricsReport(lower_median(err), *acc, n=len(err))


def metrics(pred, truth):
    return metrics_from_errors(errors_km(pred, truth))


class ErrorCdf:
    """Right-continuous empirical CDF of errors."""

    def __init__(self, errors):
        self.errors = np.sort(np.asarray(errors, dtype=np.float64))
        if len(self.errors) == 0:
            raise LengthMismatch("CDF of an empty error set")

    def __call__(self, t):
        return np.searchsorted(self.errors, t, side="right") / len(self.errors)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["error_km", "fraction"])
            n = len(self.errors)
            for i, e in enumerate(self.errors):
                if i + 1 < n and self.errors[i + 1] == e:
                    continue
                wr.writerow([f"{e:.6f}", f"{(i + 1) / n:.6f}"])


def cdf(errors):
    return ErrorCdf(errors)


def spatial_error_map(pred, truth, grid, level=2):
    """{cell_id: median error} over cells holding at least one test recording."""
    err = errors_km(pred, truth)
    t = _arr(truth)
    cells = grid.locate(level, t[:, 0], t[:, 1])
    out = {}
    for c in np.unique(cells):
        out[int(c)] = lower_median(err[cells == c])
    return out


def write_spatial_map(path, emap, grid, level=2):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["cell_id", "center_lat", "center_lon", "median_km"])
        ids = sorted(emap)
        if ids:
            lat, lon = grid.centers(level, ids)
            for c, a, b in zip(ids, lat, lon):
                wr.writerow([c, f"{a:.6f}", f"{b:.6f}", f"{emap[c]:.6f}"])


def write_report(path, report, **extra):
    d = report.to_dict()
    d.update(extra)
    with open(path, "w") as fh:
        json.dump(d, fh, indent=2, sort_keys=True)
        fh.write("\n")


# -- species-rich filter --------------------------------------------------

REQUIRED = ("duration_s", "species", "timestamp")


def _in_window(value, window, modulo):
    lo, hi = window
    if lo <= hi:
        return lo <= value <= hi
    return value >= lo or value <= hi  # wraps (e.g. Nov-Feb, 22h-04h)


def local_solar_hour(timestamp, lon):
    t = dt.datetime.fromisoformat(timestamp.replace("Z", "+00:00"))
    h = t.hour + t.minute / 60.0 + t.second / 3600.0 + lon / 15.0
    return h % 24.0


def filter_species_rich(manifest, min_duration_s=180.0, min_species=10, month_window=None,
                        hour_window=None):
    """Entries at least ``min_duration_s`` long with ``min_species`` distinct species.

    Optional month window (1-12, inclusive, may wrap) is checked on the UTC
    date; the optional hour window uses local solar time (UTC + lon/15).
    """
    need = list(REQUIRED)
    if hour_window is not None:
        need.append("lon")
    bad = [e.get("id") for e in manifest if any(e.get(k) is None for k in need)]
    if bad:
        missing = sorted({k for e in manifest for k in need if e.get(k) is None})
        raise ManifestFieldError(bad, missing)
    out = []
    for e in manifest:
        if float(e["duration_s"]) < min_duration_s:
            continue
        if len(set(e["species"])) < min_species:
            continue
        if month_window is not None and not _in_window(int(e["timestamp"][5:7]), month_window, 12):
            continue
        if hour_window is not None and not _in_window(local_solar_hour(e["timestamp"], float(e["lon"])),
                                                      hour_window, 24):
            continue
        out.append(e)
    return out
