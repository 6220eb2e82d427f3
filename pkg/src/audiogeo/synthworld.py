"""Deterministic synthetic planet: species ranges, recordings and tone audio.

Recordings cluster around observation sites (as citizen-science recordings
do) so that neighbourhood aggregation has something to group.  Every random
draw for recording ``i`` comes from ``SeedSequence([world_seed, i])``, so
generation order and worker count never change the output.
"""

import datetime as dt
import math
from dataclasses import dataclass, field, asdict
from functools import cached_property

import numpy as np

from .audio import SAMPLE_RATE, Waveform
from .errors import SamplingExhausted
from .geodesy import destination, sample_sphere
from .rangemap import CHECKLIST_THRESHOLD, RangeBump, SyntheticRangeModel, oracle_checklist

YEAR = 2023


@dataclass(frozen=True)
class WorldSpec:
    seed: int = 0
    n_species: int = 500
    bumps: tuple = (1, 3)
    sigma_km: tuple = (100.0, 2000.0)
    peak_weight: tuple = (0.3, 1.0)
    tones: tuple = (3, 5)
    freq_hz: tuple = (300.0, 8000.0)
    snr_db: float = 10.0
    duration_s: float = 10.0
    k_audible: tuple = (1, 3)
    n_sites: int = 200
    site_spread_km: float = 1.0


@dataclass
class SpeciesTones:
    freqs: np.ndarray
    amps: np.ndarray


@dataclass
class World:
    spec: WorldSpec
    model: SyntheticRangeModel
    tones: list
    sites: np.ndarray = field(default=None)  # (n_sites, 2) lat, lon

    @cached_property
    def density_bound(self):
        rng = np.random.default_rng([self.spec.seed, 7])
        lat, lon = sample_sphere(rng, 20000)
        tot = self.model.presence_many(lat, lon).sum(axis=1)
        # peaks of the summed density sit at bump centres
        c = np.array([[b.lat, b.lon] for bs in self.model.bumps for b in bs])
        tot_c = self.model.presence_many(c[:, 0], c[:, 1]).sum(axis=1)
        return 1.2 * max(tot.max(), tot_c.max())


@dataclass
class SyntheticRecording:
    id: int
    lat: float
    lon: float
    timestamp: str
    species: list
    duration_s: float
    site: int = -1
    waveform: Waveform = None

    def meta(self):
        d = asdict(self)
        d.pop("waveform")
        return d


def generate_world(spec):
    if spec.n_species < 1:
        raise ValueError("need at least one species")
    rng = np.random.default_rng([spec.seed, 1])
    species, tones = [], []
    for _ in range(spec.n_species):
        nb = int(rng.integers(spec.bumps[0], spec.bumps[1] + 1))
        lat, lon = sample_sphere(rng, nb)
        sig = rng.uniform(*spec.sigma_km, size=nb)
        w = rng.uniform(*spec.peak_weight, size=nb)
        species.append([RangeBump(float(a), float(b), float(s), float(x))
                        for a, b, s, x in zip(lat, lon, sig, w)])
        nt = int(rng.integers(spec.tones[0], spec.tones[1] + 1))
        # log-uniform frequencies, spread so tones of one species stay apart
        f = np.exp(rng.uniform(np.log(spec.freq_hz[0]), np.log(spec.freq_hz[1]), size=nt))
        tones.append(SpeciesTones(np.sort(f), rng.uniform(0.5, 1.0, size=nt)))
    world = World(spec, SyntheticRangeModel(species), tones)
    if spec.n_sites > 0:
        srng = np.random.default_rng([spec.seed, 2])
        world.sites = np.array([sample_location(world, srng) for _ in range(spec.n_sites)])
    return world


def sample_location(world, rng, max_tries=10_000):
    """Rejection sample from the summed presence density."""
    bound = world.density_bound
    for _ in range(max_tries):
        lat, lon = sample_sphere(rng, 1)
        p = world.model.presence_many(lat, lon)[0]
        if p.max() >= CHECKLIST_THRESHOLD and rng.uniform() * bound < p.sum():
            return float(lat[0]), float(lon[0])
    raise SamplingExhausted(f"no location accepted after {max_tries} proposals")


def _timestamp(rng):
    t = dt.datetime(YEAR, 1, 1, tzinfo=dt.timezone.utc) + dt.timedelta(
        days=int(rng.integers(0, 365)), seconds=int(rng.integers(0, 86400)))
    return t.strftime("%Y-%m-%dT%H:%M:%SZ")


def tone_audio(world, species, rng, duration_s, sample_rate=SAMPLE_RATE):
    """Tone bursts of every listed species plus white noise at the world SNR."""
    n = int(round(duration_s * sample_rate))
    x = np.zeros(n)
    burst = int(0.4 * sample_rate)
    env = np.hanning(burst)
    tb = np.arange(burst) / sample_rate
    for s in species:
        tn = world.tones[s]
        chirp = (tn.amps[:, None] * np.sin(2 * np.pi * tn.freqs[:, None] * tb[None, :]
                                            + rng.uniform(0, 2 * np.pi, size=(len(tn.freqs), 1)))).sum(axis=0)
        chirp *= env / len(tn.freqs)
        t = rng.uniform(0.0, 0.6)
        while True:
            start = int(t * sample_rate)
            if start >= n:
                break
            seg = chirp[:n - start]
            x[start:start + len(seg)] += seg
            t += 0.4 + rng.uniform(0.2, 1.0)
    p_sig = float(np.mean(x ** 2))
    noise_sd = math.sqrt(p_sig / 10 ** (world.spec.snr_db / 10.0)) if p_sig > 0 else 0.0
    x += rng.normal(0.0, noise_sd, size=n)
    peak = np.abs(x).max()
    if peak > 1.0:
        x /= peak
    return Waveform(x, sample_rate)


def sample_recording(world, rng, duration_s=None, k_audible=1, rec_id=0, with_audio=True,
                     max_tries=10_000):
    """One geo-tagged recording near a random site (or anywhere if the world has none)."""
    if k_audible < 1:
        raise ValueError("k_audible must be at least 1")
    duration_s = world.spec.duration_s if duration_s is None else duration_s
    for _ in range(max_tries):
        if world.sites is not None and len(world.sites):
            site = int(rng.integers(len(world.sites)))
            slat, slon = world.sites[site]
            r = abs(rng.normal(0.0, world.spec.site_spread_km))
            lat, lon = destination(slat, slon, rng.uniform(0, 360), r)
            lat, lon = float(lat), float(lon)
        else:
            site = -1
            lat, lon = sample_location(world, rng)
        p = world.model.presence_many([lat], [lon])[0]
        avail = np.flatnonzero(p >= CHECKLIST_THRESHOLD)
        if len(avail):
            break
    else:
        raise SamplingExhausted("no species present near the sampled locations")
    k = min(k_audible, len(avail))
    w = p[avail] / p[avail].sum()
    chosen = sorted(int(s) for s in rng.choice(avail, size=k, replace=False, p=w))
    ts = _timestamp(rng)
    rec = SyntheticRecording(int(rec_id), lat, lon, ts, chosen, float(duration_s), site)
    if with_audio:
        rec.waveform = tone_audio(world, chosen, rng, duration_s)
    return rec


def recording_rng(world, rec_id):
    return np.random.default_rng([world.spec.seed, 1000, int(rec_id)])


def make_recording(world, rec_id, with_audio=True):
    rng = recording_rng(world, rec_id)
    k = int(rng.integers(world.spec.k_audible[0], world.spec.k_audible[1] + 1))
    return sample_recording(world, rng, None, k, rec_id, with_audio=with_audio)


@dataclass
class Dataset:
    """Recording metadata plus (optionally) per-recording clip embeddings."""
    world: World
    train: list
    test: list
    train_clips: list = None  # list of (n_clips, d) float32 arrays
    test_clips: list = None

    @staticmethod
    def coords(recs):
        return np.array([[r.lat, r.lon] for r in recs], dtype=np.float64)

    def checklists(self, recs):
        c = self.coords(recs)
        return oracle_checklist(self.world.model.presence_many(c[:, 0], c[:, 1]))


def _featurize_one(args):
    world, rid, featurizer = args
    rec = make_recording(world, rid, with_audio=True)
    emb = featurizer.featurize_waveform(rec.waveform).astype(np.float32)
    rec.waveform = None
    return rec, emb


def generate_dataset(world, n_train, n_test, featurizer=None, jobs=1):
    """Train ids are 1..n_train, test ids follow.  With a featurizer, clip
    embeddings are computed from generated audio (audio itself is dropped)."""
    if n_train < 1 or n_test < 1:
        raise ValueError("counts must be at least 1")
    ids = list(range(1, n_train + n_test + 1))
    if featurizer is None:
        recs = [make_recording(world, i, with_audio=False) for i in ids]
        embs = None
    else:
        work = [(world, i, featurizer) for i in ids]
        if jobs > 1:
            from multiprocessing import get_context
            with get_context("fork").Pool(jobs) as pool:
                out = pool.map(_featurize_one, work, chunksize=16)
        else:
            out = [_featurize_one(w) for w in work]
        recs = [r for r, _ in out]
        embs = [e for _, e in out]
    ds = Dataset(world, recs[:n_train], recs[n_train:])
    if embs is not None:
        ds.train_clips, ds.test_clips = embs[:n_train], embs[n_train:]
    return ds


def land_mask(world, rows=180, cols=360, land_fraction=0.3):
    """1-degree raster of synthetic "land": the densest ``land_fraction`` of the
    sphere by area, ranked by summed species presence."""
    if not 0.0 < land_fraction <= 1.0:
        raise ValueError("land_fraction must be in (0, 1]")
    lat = 90.0 - (np.arange(rows) + 0.5) * 180.0 / rows
    lon = -180.0 + (np.arange(cols) + 0.5) * 360.0 / cols
    LA, LO = np.meshgrid(lat, lon, indexing="ij")
    tot = world.model.presence_many(LA.ravel(), LO.ravel()).sum(axis=1)
    area = np.cos(np.radians(LA.ravel()))
    order = np.argsort(-tot, kind="stable")
    covered = np.cumsum(area[order]) / area.sum()
    mask = np.zeros(len(tot), dtype=bool)
    mask[order[:int(np.searchsorted(covered, land_fraction)) + 1]] = True
    return mask.reshape(rows, cols)
