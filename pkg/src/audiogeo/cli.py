"""audiogeo command line: gen-world, train, evaluate, filter.

Exit codes: 0 success, 2 usage or configuration, 3 file I/O, 4 data or shape.
"""

import argparse
import hashlib
import json
import os
import sys
import warnings
from collections import OrderedDict

import numpy as np

from . import __version__
from .audio import load_audio, save_wav
from .encoders import AUDIO_DIM, BaselineFeaturizer, FourierLocationEncoder, read_embeddings_array, save_embeddings
from .errors import AudioGeoError, ConfigError, DataError, DimensionMismatch, EmptyDataset, ManifestFieldError
from .evalkit import ErrorCdf, errors_km, filter_species_rich, metrics_from_errors, spatial_error_map, \
    write_report, write_spatial_map
from .geodesy import CLASSIFICATION_AREAS_KM2, build_grid
from .geolocate import (LocationGallery, aggregate_predictions, build_gallery, group_keys, load_raster,
                        pool_clips, retrieve_many, save_raster)
from .heads import (ChecklistProbe, ClassificationHead, RegressionHead, RetrievalHead, TrainConfig, ClipSet,
                    decode_cells, predict_recordings, train_checklist_probe, train_classification,
                    train_regression, train_retrieval, write_loss_log, _pooled_probs)
from .numkit import LrSchedule, load_checkpoint, save_checkpoint
from .pipeline import FEATURE_SEED, checklist_variant, parse_scheme
from .rangemap import SyntheticRangeModel, oracle_checklist
from .synthworld import WorldSpec, generate_dataset, generate_world, land_mask, make_recording

EXIT_USAGE, EXIT_IO, EXIT_DATA = 2, 3, 4
HEADS = ("regression", "classification", "retrieval", "checklist-probe")


class UsageError(AudioGeoError):
    pass


# -- run configuration ----------------------------------------------------

def _bool(v):
    if v.lower() in ("1", "true", "yes", "on"):
        return True
    if v.lower() in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _levels(v):
    lv = tuple(int(x) for x in v.split(",") if x.strip())
    if not lv or list(lv) != sorted(set(lv)):
        raise ValueError("levels must be increasing, e.g. 0,1,2")
    return lv


CONFIG_KEYS = OrderedDict([
    ("seed", (int, 0)),
    ("head", (str, "retrieval")),
    ("loss", (str, "haversine")),
    ("levels", (_levels, (0, 1, 2))),
    ("decode", (str, "hierarchical")),
    ("bce_weight", (float, 0.01)),
    ("checklists", (str, "")),
    ("checklist_variant", (str, "full")),
    ("raw_presence", (_bool, False)),
    ("n_species", (int, 0)),
    ("temperature", (float, 0.07)),
    ("epochs", (float, 50.0)),
    ("warmup_epochs", (float, 5.0)),
    ("lr_start", (float, 1e-3)),
    ("lr_peak", (float, 1e-2)),
    ("lr_end", (float, 1e-3)),
    ("batch_size", (int, 128)),
    ("momentum", (float, 0.9)),
    ("weight_decay", (float, 1e-5)),
    ("patience", (int, 10)),
    ("val_fraction", (float, 0.1)),
    ("gallery", (str, "dataset")),
    ("pool", (str, "average")),
    ("aggregate", (str, "none")),
])


def _fmt(v):
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


class RunConfig:
    """Plain ``key = value`` file; '#' starts a comment; unknown keys are rejected."""

    def __init__(self, values=None, base_dir="."):
        self.values = OrderedDict((k, d) for k, (_, d) in CONFIG_KEYS.items())
        self.base_dir = base_dir
        for k, v in (values or {}).items():
            self.set(k, v)
        self.validate()

    def set(self, key, raw):
        if key not in CONFIG_KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        conv = CONFIG_KEYS[key][0]
        try:
            self.values[key] = conv(raw) if isinstance(raw, str) else raw
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from None

    def validate(self):
        v = self.values
        if v["head"] not in HEADS:
            raise ConfigError(f"head must be one of {', '.join(HEADS)}")
        if v["loss"] not in ("haversine", "euclidean"):
            raise ConfigError("loss must be haversine or euclidean")
        if v["decode"] not in ("flat", "hierarchical"):
            raise ConfigError("decode must be flat or hierarchical")
        if v["pool"] not in ("average", "max", "cluster"):
            raise ConfigError("pool must be average, max or cluster")
        if v["checklist_variant"] not in ("full", "corrupt50", "keep10"):
            raise ConfigError("checklist_variant must be full, corrupt50 or keep10")
        if not 0.0 <= v["val_fraction"] < 1.0:
            raise ConfigError("val_fraction must be in [0, 1)")
        if v["epochs"] <= 0 or v["batch_size"] < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if v["bce_weight"] < 0 or v["temperature"] <= 0:
            raise ConfigError("bce_weight must be >= 0 and temperature > 0")
        if max(v["levels"]) >= len(CLASSIFICATION_AREAS_KM2) or min(v["levels"]) < 0:
            raise ConfigError(f"levels must lie in 0..{len(CLASSIFICATION_AREAS_KM2) - 1}")
        try:
            parse_scheme(v["aggregate"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def parse(cls, text, base_dir="."):
        vals = OrderedDict()
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"config line {n}: expected key = value")
            k, v = (s.strip() for s in line.split("=", 1))
            if k in vals:
                raise ConfigError(f"config line {n}: duplicate key {k!r}")
            vals[k] = v
        return cls(vals, base_dir)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.parse(fh.read(), os.path.dirname(os.path.abspath(path)))

    def text(self):
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in self.values.items())

    def hash(self):
        return hashlib.sha256(self.text().encode()).hexdigest()[:16]

    def __getitem__(self, k):
        return self.values[k]

    def train_config(self):
        v = self.values
        sched = LrSchedule(v["lr_start"], v["lr_peak"], v["lr_end"], v["warmup_epochs"], v["epochs"])
        return TrainConfig(seed=v["seed"], batch_size=v["batch_size"], schedule=sched, momentum=v["momentum"],
                           weight_decay=v["weight_decay"], patience=v["patience"], temperature=v["temperature"])


# -- manifests ------------------------------------------------------------

def read_manifest(path):
    rows = []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{n}: invalid JSON ({exc.msg})") from None
    seen = set()
    for r in rows:
        if "id" not in r:
            raise DataError(f"{path}: a row has no id")
        if r["id"] in seen:
            raise DataError(f"{path}: duplicate id {r['id']}")
        seen.add(r["id"])
    return rows


def write_manifest(path, rows):
    with open(path, "w") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def _require(rows, fields):
    bad = [r.get("id") for r in rows if any(r.get(f) is None for f in fields)]
    if bad:
        missing = sorted({f for r in rows for f in fields if r.get(f) is None})
        raise ManifestFieldError(bad, missing)


def _featurize_path(path):
    return BaselineFeaturizer(FEATURE_SEED).featurize_waveform(load_audio(path)).astype(np.float32)


def load_clips(rows, manifest_path, jobs=1):
    """Clip embeddings per row, from embedding files or by featurizing audio."""
    base = os.path.dirname(os.path.abspath(manifest_path))
    _require(rows, ["lat", "lon"])
    for r in rows:
        if (r.get("audio") is None) == (r.get("embeddings") is None):
            raise DataError(f"row {r['id']}: exactly one of audio/embeddings must be set")
    out = [None] * len(rows)
    by_file = OrderedDict()
    audio = []
    for i, r in enumerate(rows):
        if r.get("embeddings") is not None:
            by_file.setdefault(os.path.join(base, r["embeddings"]), []).append(i)
        else:
            audio.append(i)
    for path, idx in by_file.items():
        ids, clip, vec = read_embeddings_array(path)
        order = np.lexsort((clip, ids))
        ids, vec = ids[order], vec[order]
        starts = np.searchsorted(ids, [int(rows[i]["id"]) for i in idx], side="left")
        ends = np.searchsorted(ids, [int(rows[i]["id"]) for i in idx], side="right")
        for i, a, b in zip(idx, starts, ends):
            if a == b:
                raise DataError(f"{path}: no embeddings for id {rows[i]['id']}")
            out[i] = vec[a:b]
    if audio:
        paths = [os.path.join(base, rows[i]["audio"]) for i in audio]
        if jobs > 1:
            from multiprocessing import get_context
            with get_context("fork").Pool(jobs) as pool:
                feats = pool.map(_featurize_path, paths)
        else:
            feats = [_featurize_path(p) for p in paths]
        for i, f in zip(audio, feats):
            out[i] = f
    return out


def _coords(rows):
    return np.array([[float(r["lat"]), float(r["lon"])] for r in rows], dtype=np.float64)


def _species_matrix(rows, n_species):
    _require(rows, ["species"])
    c = np.zeros((len(rows), n_species), dtype=np.uint8)
    for i, r in enumerate(rows):
        for s in r["species"]:
            if not 0 <= int(s) < n_species:
                raise DimensionMismatch(f"row {r['id']}: species id {s} outside 0..{n_species - 1}")
            c[i, int(s)] = 1
    return c


def _range_model(cfg, source=None):
    path = source or cfg["checklists"]
    if not os.path.isabs(path):
        path = os.path.join(cfg.base_dir, path)
    return SyntheticRangeModel.load(path)


def checklist_source(cfg, rows, model=None):
    """(checklists or presence scores, n_species) for the rows, per the config."""
    src = cfg["checklists"]
    if not src and model is None:
        raise DataError("config field 'checklists' is required for this head "
                        "(a range-model JSON path or 'manifest')")
    if src == "manifest" and model is None:
        n = cfg["n_species"] or 1 + max((int(s) for r in rows for s in (r.get("species") or [])), default=-1)
        if n < 1:
            raise DataError("config field 'checklists' = manifest, but no species lists were found")
        return _species_matrix(rows, n), n
    m = model or _range_model(cfg)
    y = _coords(rows)
    p = m.presence_many(y[:, 0], y[:, 1])
    if cfg["raw_presence"]:
        return p, m.n_species
    return oracle_checklist(p), m.n_species


# -- checkpoint metadata --------------------------------------------------

def _text_array(s):
    return np.frombuffer(s.encode("utf-8"), dtype=np.uint8).astype(np.float64)


def _array_text(a):
    return bytes(np.asarray(a, dtype=np.uint8)).decode("utf-8")


def save_model(path, cfg, heads, gallery_latlon=None):
    d = OrderedDict()
    d["meta.config"] = _text_array(cfg.text())
    for name, h in heads:
        d.update((f"{name}.{k}", v) for k, v in h.state_dict().items())
    if gallery_latlon is not None:
        d["gallery.latlon"] = gallery_latlon
    save_checkpoint(path, d)


def load_model(path):
    d = load_checkpoint(path)
    if "meta.config" not in d:
        raise DataError(f"{path}: checkpoint has no run configuration")
    cfg = RunConfig.parse(_array_text(d["meta.config"]))

    def sub(prefix):
        return OrderedDict((k[len(prefix):], v) for k, v in d.items() if k.startswith(prefix))

    kind = cfg["head"]
    heads = []
    if kind == "regression":
        s = sub("head.")
        h = RegressionHead(s["w1"].shape[0], cfg["loss"])
        h.load_state_dict(s)
        heads.append(h)
    elif kind == "classification":
        for lvl in cfg["levels"]:
            s = sub(f"L{lvl}.")
            h = ClassificationHead(s["w1"].shape[0], s["w1"].shape[1], level=lvl)
            h.load_state_dict(s)
            heads.append(h)
    elif kind == "retrieval":
        s = sub("head.")
        h = RetrievalHead(s["loc.w1"].shape[0], s["chk.w2"].shape[1], s["loc.w2"].shape[1])
        h.load_state_dict(s)
        heads.append(h)
    else:
        s = sub("head.")
        h = ChecklistProbe(s["w1"].shape[0], s["w1"].shape[1])
        h.load_state_dict(s)
        heads.append(h)
    return cfg, heads, d.get("gallery.latlon")


# -- commands -------------------------------------------------------------

def cmd_gen_world(a):
    if a.species < 1:
        raise UsageError("--species must be at least 1")
    if a.train < 1 or a.test < 1:
        raise UsageError("--train and --test must be at least 1")
    if a.jobs < 1:
        raise UsageError("--jobs must be at least 1")
    os.makedirs(a.out, exist_ok=True)
    spec = WorldSpec(seed=a.seed, n_species=a.species, n_sites=a.sites)
    world = generate_world(spec)
    world.model.save(os.path.join(a.out, "range_model.json"))
    save_raster(os.path.join(a.out, "land.s2lr"), land_mask(world))
    with open(os.path.join(a.out, "world.json"), "w") as fh:
        meta = dict(spec=dict(spec.__dict__), feature_seed=FEATURE_SEED, n_train=a.train, n_test=a.test,
                    version=__version__)
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if a.audio:
        adir = os.path.join(a.out, "audio")
        os.makedirs(adir, exist_ok=True)
        ids = range(1, a.train + a.test + 1)
        recs = []
        for i in ids:
            r = make_recording(world, i, with_audio=True)
            save_wav(os.path.join(adir, f"{i}.wav"), r.waveform)
            r.waveform = None
            recs.append(r)
        splits = [("train", recs[:a.train], None), ("test", recs[a.train:], None)]
    else:
        ds = generate_dataset(world, a.train, a.test, BaselineFeaturizer(FEATURE_SEED), jobs=a.jobs)
        splits = [("train", ds.train, ds.train_clips), ("test", ds.test, ds.test_clips)]
    for name, recs, clips in splits:
        rows = []
        for j, r in enumerate(recs):
            row = r.meta()
            row.pop("site", None)
            row["audio"] = f"audio/{r.id}.wav" if clips is None else None
            row["embeddings"] = f"{name}.emb" if clips is not None else None
            rows.append(row)
        write_manifest(os.path.join(a.out, f"{name}.jsonl"), rows)
        if clips is not None:
            save_embeddings(os.path.join(a.out, f"{name}.emb"),
                            ((r.id, k, v) for r, c in zip(recs, clips) for k, v in enumerate(c)), dim=AUDIO_DIM)
    print(f"world seed {a.seed}: {a.species} species, {a.train} train / {a.test} test recordings -> {a.out}")
    return 0


def _split_val(n, frac, seed):
    if frac <= 0 or n < 2:
        return np.arange(n), np.arange(0)
    perm = np.random.default_rng([seed, 17]).permutation(n)
    k = min(n - 1, max(1, int(round(frac * n))))
    return np.sort(perm[k:]), np.sort(perm[:k])


def cmd_train(a):
    cfg = RunConfig.load(a.config)
    rows = read_manifest(a.manifest)
    if not rows:
        raise EmptyDataset(f"{a.manifest}: no rows")
    clips = load_clips(rows, a.manifest, a.jobs)
    y = _coords(rows)
    tc = cfg.train_config()
    tr, va = _split_val(len(rows), cfg["val_fraction"], cfg["seed"])
    sel = lambda xs, idx: [xs[i] for i in idx]  # noqa: E731
    val = (sel(clips, va), y[va]) if len(va) else None
    kind = cfg["head"]
    os.makedirs(a.out, exist_ok=True)
    d_in = clips[0].shape[1]
    gallery = None
    histories = []
    if kind == "regression":
        h = RegressionHead(d_in, cfg["loss"], seed=cfg["seed"])
        histories.append(("", train_regression(h, sel(clips, tr), y[tr], tc, val)))
        named = [("head", h)]
    elif kind == "classification":
        grid = build_grid(CLASSIFICATION_AREAS_KM2)
        named = []
        for lvl in cfg["levels"]:
            h = ClassificationHead(d_in, grid.n_cells(lvl), level=lvl, seed=cfg["seed"] + lvl)
            histories.append((f"_L{lvl}", train_classification(h, sel(clips, tr), y[tr], grid, lvl, tc, val)))
            named.append((f"L{lvl}", h))
    elif kind == "retrieval":
        enc = FourierLocationEncoder(cfg["seed"])
        if cfg["bce_weight"] > 0:
            chk, n_species = checklist_source(cfg, rows)
            chk = chk[tr]
        else:
            chk, n_species = None, max(1, cfg["n_species"])
        h = RetrievalHead(d_in, n_species, bce_weight=cfg["bce_weight"], seed=cfg["seed"])
        histories.append(("", train_retrieval(h, sel(clips, tr), y[tr], chk, enc, tc, val)))
        named = [("head", h)]
        gallery = y[tr]
    else:
        enc = FourierLocationEncoder(cfg["seed"])
        chk, n_species = checklist_source(cfg, rows)
        if not cfg["raw_presence"]:
            chk = checklist_variant(chk, cfg["checklist_variant"], np.random.default_rng([cfg["seed"], 55]))
        h = ChecklistProbe(n_species, seed=cfg["seed"])
        pval = (chk[va], y[va]) if len(va) else None
        histories.append(("", train_checklist_probe(h, chk[tr], y[tr], enc, tc, pval)))
        named = [("head", h)]
        gallery = y[tr]
    ckpt = os.path.join(a.out, "model.s2lw")
    save_model(ckpt, cfg, named, gallery)
    for suffix, hist in histories:
        write_loss_log(os.path.join(a.out, f"loss_log{suffix}.csv"), hist)
    with open(os.path.join(a.out, "config.txt"), "w") as fh:
        fh.write(cfg.text())
    vals = [r["val_median_km"] for _, hist in histories for r in hist if np.isfinite(r["val_median_km"])]
    best = min(vals) if vals else float("nan")
    print(f"trained {kind} head on {len(tr)} recordings (config {cfg.hash()}, seed {cfg['seed']})")
    print(f"final validation median error: {best:.3f} km")
    return 0


def _gallery(spec, cfg, enc, train_latlon, land_path, manifest_dir):
    kind, _, arg = spec.partition(":")
    if kind == "dataset":
        if train_latlon is None:
            raise DataError("checkpoint holds no training locations for a dataset gallery")
        return build_gallery("dataset", enc, locations=train_latlon)
    if kind == "custom":
        if not arg:
            raise UsageError("custom gallery needs a CSV path: custom:PATH")
        import csv
        with open(arg) as fh:
            pts = [(float(r["lat"]), float(r["lon"])) for r in csv.DictReader(fh)]
        return build_gallery("custom", enc, locations=pts)
    step = float(arg) if arg else (0.5 if kind == "neighbors" else 1.0)
    if kind == "uniform":
        return build_gallery("uniform", enc, step)
    if kind == "land":
        path = land_path or os.path.join(manifest_dir, "land.s2lr")
        return build_gallery("land", enc, step, land_mask=load_raster(path))
    if kind == "neighbors":
        if train_latlon is None:
            raise DataError("checkpoint holds no training locations for a neighbors gallery")
        return build_gallery("neighbors", enc, step, locations=train_latlon,
                             grid=build_grid(CLASSIFICATION_AREAS_KM2), level=2)
    raise UsageError(f"unknown gallery {spec!r}")


def _groups(rows, scheme):
    parsed = parse_scheme(scheme)
    if parsed is None:
        return None
    grid, level, period = parsed
    _require(rows, ["timestamp"])
    y = _coords(rows)
    return group_keys(y[:, 0], y[:, 1], [r["timestamp"] for r in rows], grid, level, period)


def _group_mean(x, keys):
    groups = OrderedDict()
    for i, k in enumerate(keys):
        groups.setdefault(k, []).append(i)
    out = np.empty_like(x)
    for members in groups.values():
        out[members] = x[members].mean(axis=0)
    return out


def cmd_evaluate(a):
    cfg, heads, train_latlon = load_model(a.checkpoint)
    if a.head and a.head != cfg["head"]:
        raise UsageError(f"--head {a.head} does not match the checkpoint ({cfg['head']})")
    pool = a.pool or cfg["pool"]
    scheme = a.aggregate or cfg["aggregate"]
    gallery_spec = a.gallery or cfg["gallery"]
    try:
        parse_scheme(scheme)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    rows = read_manifest(a.manifest)
    if not rows:
        raise EmptyDataset(f"{a.manifest}: no rows")
    truth = _coords(rows)
    kind = cfg["head"]
    keys = _groups(rows, scheme)
    mdir = os.path.dirname(os.path.abspath(a.manifest))
    # relative paths stored in the checkpoint config resolve beside the test manifest
    cfg.base_dir = mdir
    if kind == "checklist-probe":
        if a.oracle or cfg["checklists"] != "manifest":
            model = _range_model(cfg, a.range_model or (None if cfg["checklists"] not in ("", "manifest")
                                                        else "range_model.json"))
            x, _ = checklist_source(cfg, rows, model)
        else:
            x, _ = checklist_source(cfg, rows)
        if not cfg["raw_presence"]:
            x = checklist_variant(x, cfg["checklist_variant"], np.random.default_rng([cfg["seed"], 56]))
        h = heads[0]
        if x.shape[1] != h.net.d_in:
            raise DimensionMismatch(f"checklists have {x.shape[1]} species, probe expects {h.net.d_in}")
        enc = FourierLocationEncoder(cfg["seed"])
        g = _gallery(gallery_spec, cfg, enc, train_latlon, a.land, mdir)
        q = h.embed(x)
        picks = aggregate_predictions(q, g, keys) if keys else retrieve_many(q, g)
        pred = np.column_stack([g.lat[picks], g.lon[picks]])
    else:
        clips = load_clips(rows, a.manifest, a.jobs)
        if clips[0].shape[1] != heads[0].norm.mean.shape[0]:
            raise DimensionMismatch(f"embeddings have dim {clips[0].shape[1]}, "
                                    f"head expects {heads[0].norm.mean.shape[0]}")
        cs = ClipSet(clips)
        if kind == "regression":
            if keys is not None:
                raise UsageError("aggregation needs a head that outputs a distribution (not regression)")
            pred = predict_recordings(heads[0], cs)
        elif kind == "classification":
            grid = build_grid(CLASSIFICATION_AREAS_KM2)
            probs = [_pooled_probs(h, cs) for h in heads]
            if keys is not None:
                probs = [_group_mean(p, keys) for p in probs]
            mode = a.decode or cfg["decode"]
            cells = decode_cells(probs, heads, grid, mode)
            lat, lon = grid.centers(heads[-1].level, cells[:, -1])
            pred = np.column_stack([lat, lon])
        else:
            enc = FourierLocationEncoder(cfg["seed"])
            g = _gallery(gallery_spec, cfg, enc, train_latlon, a.land, mdir)
            h = heads[0]
            q = np.stack([pool_clips(h.embed(cs.recording(i)), pool) for i in range(len(cs))])
            picks = aggregate_predictions(q, g, keys) if keys else retrieve_many(q, g)
            pred = np.column_stack([g.lat[picks], g.lon[picks]])
    err = errors_km(pred, truth)
    rep = metrics_from_errors(err)
    stem = a.report[:-5] if a.report.endswith(".json") else a.report
    out_dir = os.path.dirname(os.path.abspath(a.report))
    os.makedirs(out_dir, exist_ok=True)
    write_report(a.report, rep, config_hash=cfg.hash(), seed=cfg["seed"], head=kind, pool=pool,
                 aggregate=scheme, gallery=gallery_spec if kind in ("retrieval", "checklist-probe") else None)
    ErrorCdf(err).to_csv(stem + "_cdf.csv")
    grid = build_grid(CLASSIFICATION_AREAS_KM2)
    write_spatial_map(stem + "_map.csv", spatial_error_map(pred, truth, grid, 2), grid, 2)
    print(f"n={rep.n} median={rep.median_km:.1f} km  city={rep.acc_25:.3f} region={rep.acc_200:.3f} "
          f"country={rep.acc_750:.3f} continent={rep.acc_2500:.3f}")
    return 0


def _window(s, lo, hi, name):
    if s is None:
        return None
    try:
        a, b = (float(x) for x in s.split("-"))
    except ValueError:
        raise UsageError(f"--{name} must look like A-B") from None
    if not (lo <= a <= hi and lo <= b <= hi):
        raise UsageError(f"--{name} values must lie in [{lo}, {hi}]")
    return a, b


def cmd_filter(a):
    months = _window(a.months, 1, 12, "months")
    hours = _window(a.hours, 0, 24, "hours")
    if a.min_duration < 0 or a.min_species < 0:
        raise UsageError("thresholds must be non-negative")
    rows = read_manifest(a.manifest)
    kept = filter_species_rich(rows, a.min_duration, a.min_species, months, hours)
    write_manifest(a.out, kept)
    print(f"kept {len(kept)} dropped {len(rows) - len(kept)}")
    if not kept:
        warnings.warn("filter kept no recordings; wrote an empty manifest")
    return 0


# -- entry point ----------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="audiogeo", description="Audio geolocation experiments.")
    p.add_argument("--version", action="version", version=f"audiogeo {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-world", help="generate a synthetic world and its recordings")
    g.add_argument("--seed", type=int, default=0, help="world seed (default 0)")
    g.add_argument("--species", type=int, default=500, help="number of species (default 500)")
    g.add_argument("--train", type=int, default=5000, help="training recordings (default 5000)")
    g.add_argument("--test", type=int, default=1000, help="test recordings (default 1000)")
    g.add_argument("--sites", type=int, default=200, help="observation sites (default 200)")
    g.add_argument("--audio", action="store_true", help="write WAV files instead of clip embeddings")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--jobs", type=int, default=1, help="worker processes (output does not depend on it)")
    g.set_defaults(func=cmd_gen_world)

    t = sub.add_parser("train", help="train a geolocation head")
    t.add_argument("--config", required=True, help="key = value run configuration")
    t.add_argument("--manifest", required=True, help="training manifest (JSONL)")
    t.add_argument("--out", required=True, help="output directory for model.s2lw and loss logs")
    t.add_argument("--jobs", type=int, default=1, help="workers for featurizing audio manifests")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="evaluate a trained head on a manifest")
    e.add_argument("--checkpoint", required=True, help="model.s2lw written by train")
    e.add_argument("--manifest", required=True, help="test manifest (JSONL)")
    e.add_argument("--gallery", help="dataset | uniform[:STEP] | land[:STEP] | neighbors[:STEP] | custom:CSV")
    e.add_argument("--land", help="land raster (S2LR) for the land gallery; default land.s2lr next to the manifest")
    e.add_argument("--pool", choices=("average", "max", "cluster"), help="clip pooling for retrieval")
    e.add_argument("--aggregate", help="none | cell36:PERIOD | cell253:PERIOD, PERIOD in year/month/week")
    e.add_argument("--decode", choices=("flat", "hierarchical"), help="classification decoding")
    e.add_argument("--head", choices=HEADS, help="expected head kind (checked against the checkpoint)")
    e.add_argument("--oracle", action="store_true",
                   help="checklist probe: use range-model checklists at the true locations")
    e.add_argument("--range-model", help="range model JSON for --oracle (default: from the config)")
    e.add_argument("--report", required=True, help="metrics JSON path; _cdf.csv and _map.csv written beside it")
    e.add_argument("--jobs", type=int, default=1, help="workers for featurizing audio manifests")
    e.set_defaults(func=cmd_evaluate)

    f = sub.add_parser("filter", help="keep species-rich recordings (dawn-chorus style)")
    f.add_argument("--manifest", required=True)
    f.add_argument("--min-duration", type=float, default=180.0, help="seconds (default 180)")
    f.add_argument("--min-species", type=int, default=10, help="distinct species (default 10)")
    f.add_argument("--months", help="inclusive UTC month window, e.g. 3-6 or 11-2")
    f.add_argument("--hours", help="inclusive local solar hour window, e.g. 4-8 or 22-2")
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_filter)
    return p


def main(argv=None):
    parser = build_parser()
    a = parser.parse_args(argv)
    try:
        return a.func(a)
    except (UsageError, ConfigError) as exc:
        print(f"audiogeo: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"audiogeo: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"audiogeo: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
