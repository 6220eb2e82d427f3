"""Experiment runners on the synthetic world, shared by the command line and
the acceptance suite.  Every runner returns MetricsReport objects computed on
the dataset's test split."""

from dataclasses import dataclass

import numpy as np

from .encoders import BaselineFeaturizer, FourierLocationEncoder
from .evalkit import metrics_from_errors
from .geodesy import AGGREGATION_AREAS_KM2, CLASSIFICATION_AREAS_KM2, build_grid, haversine_np
from .geolocate import aggregate_predictions, build_gallery, group_keys, naive_baseline, retrieve_many
from .heads import (ChecklistProbe, ClassificationHead, RegressionHead, RetrievalHead, TrainConfig,
                    predict_classification, predict_embeddings, predict_recordings, train_checklist_probe,
                    train_classification, train_regression, train_retrieval, train_species_classifier,
                    _as_clipset, _pooled_probs)
from .rangemap import corrupt_checklist, keep_random_k
from .synthworld import WorldSpec, generate_dataset, generate_world

# the frozen audio featurizer is one fixed network, shared by every world
FEATURE_SEED = 0
CHECKLIST_VARIANTS = ("full", "corrupt50", "keep10")


def make_dataset(seed=0, n_species=500, n_train=5000, n_test=1000, features=True, jobs=1, **spec):
    world = generate_world(WorldSpec(seed=seed, n_species=n_species, **spec))
    feat = BaselineFeaturizer(FEATURE_SEED) if features else None
    return generate_dataset(world, n_train, n_test, featurizer=feat, jobs=jobs)


def report(pred, truth):
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    return metrics_from_errors(haversine_np(pred[:, 0], pred[:, 1], truth[:, 0], truth[:, 1]))


def gallery_report(picks, gallery, truth):
    return report(np.column_stack([gallery.lat[picks], gallery.lon[picks]]), truth)


# -- checklist oracle -----------------------------------------------------

def checklist_variant(checklists, variant, rng):
    if variant == "full":
        return np.array(checklists, dtype=np.uint8)
    if variant == "corrupt50":
        return np.array([corrupt_checklist(c, 0.5, rng) for c in checklists])
    if variant == "keep10":
        return np.array([keep_random_k(c, 10, rng) for c in checklists])
    raise ValueError(f"unknown checklist variant {variant!r}")


def run_checklist_probe(ds, variant="full", cfg=None, raw=False):
    """Checklist -> location probe; the variant applies to train and test checklists."""
    cfg = cfg or TrainConfig(seed=ds.world.spec.seed)
    enc = FourierLocationEncoder(cfg.seed)
    ytr, yte = ds.coords(ds.train), ds.coords(ds.test)
    if raw:
        m = ds.world.model
        xtr = m.presence_many(ytr[:, 0], ytr[:, 1])
        xte = m.presence_many(yte[:, 0], yte[:, 1])
    else:
        rng = np.random.default_rng([cfg.seed, 55])
        xtr = checklist_variant(ds.checklists(ds.train), variant, rng)
        xte = checklist_variant(ds.checklists(ds.test), variant, rng)
    probe = ChecklistProbe(ds.world.model.n_species, seed=cfg.seed)
    train_checklist_probe(probe, xtr, ytr, enc, cfg)
    gal = build_gallery("dataset", enc, locations=ytr)
    return gallery_report(retrieve_many(probe.embed(xte), gal), gal, yte)


# -- regression / classification -----------------------------------------

def run_regression(ds, loss="haversine", cfg=None):
    cfg = cfg or TrainConfig(seed=ds.world.spec.seed)
    head = RegressionHead(ds.train_clips[0].shape[1], loss, seed=cfg.seed)
    train_regression(head, ds.train_clips, ds.coords(ds.train), cfg)
    return report(predict_recordings(head, ds.test_clips), ds.coords(ds.test))


def train_classifiers(ds, levels=(0, 1, 2), cfg=None, grid=None):
    cfg = cfg or TrainConfig(seed=ds.world.spec.seed)
    grid = grid or build_grid(CLASSIFICATION_AREAS_KM2)
    heads = []
    ytr = ds.coords(ds.train)
    for lvl in levels:
        h = ClassificationHead(ds.train_clips[0].shape[1], grid.n_cells(lvl), level=lvl, seed=cfg.seed + lvl)
        train_classification(h, ds.train_clips, ytr, grid, lvl, cfg)
        heads.append(h)
    return heads, grid


def classification_reports(ds, heads, grid):
    """Flat decoding per level plus hierarchical decoding over all heads."""
    yte = ds.coords(ds.test)
    cs = _as_clipset(ds.test_clips)
    out = {}
    for h in heads:
        out[f"flat{h.level}"] = report(predict_classification([h], cs, grid, "flat"), yte)
    out["hierarchical"] = report(predict_classification(heads, cs, grid, "hierarchical"), yte)
    return out


def run_classification(ds, levels=(0, 1, 2), cfg=None):
    heads, grid = train_classifiers(ds, levels, cfg)
    return classification_reports(ds, heads, grid)


# -- species ranges -------------------------------------------------------

def run_species_range(ds, cfg=None, step_deg=2.0):
    """Species classifier on audio, then range-map geolocation from its
    top-1 species versus the full softmax.  Returns per-recording errors (km)
    as (top1, all)."""
    from .geolocate import uniform_lattice
    cfg = cfg or TrainConfig(seed=ds.world.spec.seed)
    m = ds.world.model
    head = ClassificationHead(ds.train_clips[0].shape[1], m.n_species, seed=cfg.seed)
    train_species_classifier(head, ds.train_clips, [r.species for r in ds.train], cfg)
    probs = _pooled_probs(head, _as_clipset(ds.test_clips))
    lat, lon = uniform_lattice(step_deg)
    pres = m.presence_many(lat, lon)  # (n_points, S)
    yte = ds.coords(ds.test)
    onehot = np.zeros_like(probs)
    onehot[np.arange(len(probs)), probs.argmax(axis=1)] = 1.0
    out = []
    for w in (onehot, probs):
        # argmax of the weighted mean map; the normaliser does not move it
        pick = np.argmax(w @ pres.T, axis=1)
        out.append(haversine_np(lat[pick], lon[pick], yte[:, 0], yte[:, 1]))
    return tuple(out)


# -- retrieval ------------------------------------------------------------

@dataclass
class RetrievalRun:
    head: RetrievalHead
    encoder: FourierLocationEncoder
    gallery: object
    queries: np.ndarray
    report: object


def run_retrieval(ds, bce_weight=0.01, cfg=None, pool="average"):
    cfg = cfg or TrainConfig(seed=ds.world.spec.seed)
    enc = FourierLocationEncoder(cfg.seed)
    ytr, yte = ds.coords(ds.train), ds.coords(ds.test)
    head = RetrievalHead(ds.train_clips[0].shape[1], ds.world.model.n_species, bce_weight=bce_weight,
                         seed=cfg.seed)
    train_retrieval(head, ds.train_clips, ytr, ds.checklists(ds.train), enc, cfg)
    gal = build_gallery("dataset", enc, locations=ytr)
    q = predict_embeddings(head, ds.test_clips, pool)
    return RetrievalRun(head, enc, gal, q, gallery_report(retrieve_many(q, gal), gal, yte))


def parse_scheme(scheme):
    """'cell36:year' -> (grid, level, period); 'none' -> None."""
    if scheme in (None, "none"):
        return None
    try:
        cell, period = scheme.split(":")
    except ValueError:
        raise ValueError(f"aggregation scheme must look like cell36:year, got {scheme!r}") from None
    if cell not in AGGREGATION_AREAS_KM2:
        raise ValueError(f"unknown aggregation cell {cell!r}; choose from {sorted(AGGREGATION_AREAS_KM2)}")
    if period not in ("year", "month", "week"):
        raise ValueError(f"unknown aggregation period {period!r}")
    return aggregation_grid(), aggregation_level(cell), period


_AGG_GRID = []


def aggregation_grid():
    if not _AGG_GRID:
        areas = sorted(AGGREGATION_AREAS_KM2.values(), reverse=True)
        _AGG_GRID.append(build_grid(areas))
    return _AGG_GRID[0]


def aggregation_level(cell):
    areas = sorted(AGGREGATION_AREAS_KM2.values(), reverse=True)
    return areas.index(AGGREGATION_AREAS_KM2[cell])


def aggregated_report(ds, run, scheme):
    yte = ds.coords(ds.test)
    parsed = parse_scheme(scheme)
    if parsed is None:
        return run.report
    grid, level, period = parsed
    keys = group_keys(yte[:, 0], yte[:, 1], [r.timestamp for r in ds.test], grid, level, period)
    return gallery_report(aggregate_predictions(run.queries, run.gallery, keys), run.gallery, yte)


def run_naive(ds, seed=0):
    ytr, yte = ds.coords(ds.train), ds.coords(ds.test)
    return report(naive_baseline(ytr, len(yte), np.random.default_rng(seed)), yte)
