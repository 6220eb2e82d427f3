"""Geolocation heads and their training loops.

All heads train on clip-level examples: each epoch visits every recording
once in a seeded random order and draws one of its clips uniformly.
Inputs are standardised with training-set statistics that are stored with
the head.
"""

import csv
import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, EmptyDataset
from .geodesy import EARTH_RADIUS_KM, haversine_np, wrap_lon
from .numkit import (LrSchedule, Mlp, SgdState, l2_normalize, l2_normalize_backward, loss_bce_logits,
                     loss_euclidean, loss_haversine, loss_info_nce, loss_softmax_ce, mlp_head,
                     sgd_step, softmax, load_checkpoint, save_checkpoint)

KM_PER_DEG = EARTH_RADIUS_KM * math.pi / 180.0


@dataclass
class TrainConfig:
    seed: int = 0
    batch_size: int = 128
    schedule: LrSchedule = field(default_factory=LrSchedule)
    momentum: float = 0.9
    weight_decay: float = 1e-5
    patience: int = 10
    temperature: float = 0.07

    @property
    def epochs(self):
        return int(math.ceil(self.schedule.total_epochs))


# -- data -----------------------------------------------------------------

class ClipSet:
    """Per-recording clip matrices flattened into one array."""

    def __init__(self, clips):
        clips = [np.asarray(c, dtype=np.float32).reshape(len(c), -1) for c in clips]
        if not clips:
            raise EmptyDataset("no recordings")
        dims = {c.shape[1] for c in clips}
        if len(dims) != 1:
            raise DimensionMismatch(f"mixed embedding dims {sorted(dims)}")
        self.dim = dims.pop()
        self.counts = np.array([len(c) for c in clips])
        if np.any(self.counts == 0):
            raise EmptyDataset("a recording has no clips")
        self.offsets = np.concatenate([[0], np.cumsum(self.counts)[:-1]])
        self.data = np.concatenate(clips)

    def __len__(self):
        return len(self.counts)

    def draw(self, rng, recs):
        """One random clip per requested recording."""
        pick = self.offsets[recs] + (rng.random(len(recs)) * self.counts[recs]).astype(np.int64)
        return self.data[pick]

    def recording(self, i):
        return self.data[self.offsets[i]:self.offsets[i] + self.counts[i]]

    def means(self):
        return np.add.reduceat(self.data.astype(np.float64), self.offsets) / self.counts[:, None]


def _as_clipset(x):
    if isinstance(x, ClipSet):
        return x
    x = list(x) if not isinstance(x, np.ndarray) else x
    if isinstance(x, np.ndarray) and x.ndim == 2:
        return ClipSet([row[None, :] for row in x])
    return ClipSet(x)


class Standardizer:
    def __init__(self, mean, scale):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.scale = np.asarray(scale, dtype=np.float64)

    @classmethod
    def fit(cls, x, gain=1.0):
        x = np.asarray(x, dtype=np.float64)
        sd = x.std(axis=0)
        sd = np.where(sd > 1e-12, sd, 1.0)
        return cls(x.mean(axis=0), sd / gain)

    @classmethod
    def identity(cls, d):
        return cls(np.zeros(d), np.ones(d))

    def __call__(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.scale


# -- training loop --------------------------------------------------------

def fit(params, n_items, step_fn, cfg, val_fn=None, log=None):
    """Mini-batch Nesterov SGD over ``n_items`` recordings.

    ``step_fn(idx, rng) -> (loss, grads)``; ``val_fn() -> median km`` enables
    early stopping (best weights are restored).  Biases are not decayed.
    """
    if n_items < 1:
        raise EmptyDataset("empty training set")
    rng = np.random.default_rng([cfg.seed, 99])
    state = SgdState(cfg.momentum, cfg.weight_decay, True)
    decay = {k: (cfg.weight_decay if v.ndim > 1 else 0.0) for k, v in params.items()}
    nb = max(1, math.ceil(n_items / cfg.batch_size))
    history = []
    best, best_val, bad = None, math.inf, 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n_items)
        losses = []
        for b in range(nb):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            lr = cfg.schedule(epoch + b / nb)
            loss, grads = step_fn(idx, rng)
            _step(params, grads, state, lr, decay)
            losses.append(loss * len(idx))
        row = dict(epoch=epoch, lr=cfg.schedule(epoch + 1), train_loss=sum(losses) / n_items,
                   val_median_km=float("nan"))
        if val_fn is not None:
            v = float(val_fn())
            row["val_median_km"] = v
            if v < best_val - 1e-9:
                best_val, bad = v, 0
                best = {k: p.copy() for k, p in params.items()}
            else:
                bad += 1
        history.append(row)
        if log is not None:
            log(row)
        if val_fn is not None and bad >= cfg.patience:
            break
    if best is not None:
        for k in params:
            params[k][...] = best[k]
    return history


def _step(params, grads, state, lr, decay):
    for k in params:
        state.weight_decay = decay[k]
        sgd_step({k: params[k]}, {k: grads[k]}, state, lr)


def write_loss_log(path, history):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["epoch", "lr", "train_loss", "val_median_km"])
        for r in history:
            wr.writerow([r["epoch"], f"{r['lr']:.8g}", f"{r['train_loss']:.8g}", f"{r['val_median_km']:.6g}"])


def _coords(y):
    if isinstance(y, np.ndarray):
        return np.asarray(y, dtype=np.float64).reshape(-1, 2)
    return np.array([[p.lat_deg, p.lon_deg] for p in y], dtype=np.float64).reshape(-1, 2)


def _median_km(pred, truth):
    return float(np.median(haversine_np(pred[:, 0], pred[:, 1], truth[:, 0], truth[:, 1])))


# -- regression -----------------------------------------------------------

class RegressionHead:
    """Linear(d -> 2) producing raw (lat, lon) in degrees."""

    kind = "regression"

    def __init__(self, d_in=1280, loss="haversine", seed=0):
        if loss not in ("haversine", "euclidean"):
            raise ValueError(f"unknown loss {loss!r}")
        self.loss = loss
        self.net = Mlp(d_in, 2, seed=seed)
        self.norm = Standardizer.identity(d_in)

    @property
    def params(self):
        return self.net.params

    def raw(self, x):
        return self.net(self.norm(x))

    def predict(self, x):
        """Wrapped (lat, lon) array."""
        y = self.raw(x)
        return np.column_stack([np.clip(y[:, 0], -90, 90), wrap_lon(y[:, 1])])

    def loss_grad(self, x, y):
        out, acts = self.net.forward(self.norm(x), keep=True)
        if self.loss == "haversine":
            loss, g = loss_haversine(out, y)
            # optimise in degrees of arc so both losses share a gradient scale
            loss, g = loss / KM_PER_DEG, g / KM_PER_DEG
        else:
            loss, g = loss_euclidean(out, y)
        grads, _ = self.net.backward(acts, g)
        return loss, grads

    def state_dict(self):
        return _state(self.net, self.norm)

    def load_state_dict(self, d):
        _load(self.net, self.norm, d)


def train_regression(head, clips, locations, cfg=None, val=None, log=None):
    cfg = cfg or TrainConfig()
    cs = _as_clipset(clips)
    y = _coords(locations)
    if len(cs) == 0:
        raise EmptyDataset("empty dataset")
    if len(y) != len(cs):
        raise DimensionMismatch("clips and locations differ in length")
    head.norm = Standardizer.fit(cs.data)
    head.params["w1"][...] = 0.0
    head.params["b1"][...] = [y[:, 0].mean(), y[:, 1].mean()]

    def step(idx, rng):
        return head.loss_grad(cs.draw(rng, idx), y[idx])

    return fit(head.params, len(cs), step, cfg, _val_fn(head, val), log)


def _val_fn(head, val):
    if val is None:
        return None
    vclips, vtruth = val
    vcs = _as_clipset(vclips)
    vt = _coords(vtruth)
    return lambda: _median_km(predict_recordings(head, vcs), vt)


# -- classification -------------------------------------------------------

class ClassificationHead:
    """Linear(d -> C) over the cells of one grid level."""

    kind = "classification"

    def __init__(self, d_in, n_classes, level=0, seed=0):
        self.level = level
        self.net = Mlp(d_in, n_classes, seed=seed)
        self.norm = Standardizer.identity(d_in)

    @property
    def params(self):
        return self.net.params

    def logits(self, x):
        return self.net(self.norm(x))

    def probs(self, x):
        return softmax(self.logits(x))

    def loss_grad(self, x, labels):
        out, acts = self.net.forward(self.norm(x), keep=True)
        loss, g = loss_softmax_ce(out, labels)
        grads, _ = self.net.backward(acts, g)
        return loss, grads

    def state_dict(self):
        return _state(self.net, self.norm)

    def load_state_dict(self, d):
        _load(self.net, self.norm, d)


def train_classification(head, clips, locations, grid, level=None, cfg=None, val=None, log=None):
    cfg = cfg or TrainConfig()
    level = head.level if level is None else level
    cs = _as_clipset(clips)
    y = _coords(locations)
    if len(cs) == 0:
        raise EmptyDataset("empty dataset")
    if head.net.d_out != grid.n_cells(level):
        raise DimensionMismatch(f"head has {head.net.d_out} classes, level {level} has {grid.n_cells(level)}")
    labels = grid.locate(level, y[:, 0], y[:, 1])
    head.norm = Standardizer.fit(cs.data)

    def step(idx, rng):
        return head.loss_grad(cs.draw(rng, idx), labels[idx])

    vfn = None
    if val is not None:
        vcs, vt = _as_clipset(val[0]), _coords(val[1])

        def vfn():
            return _median_km(predict_classification([head], vcs, grid, "flat"), vt)

    return fit(head.params, len(cs), step, cfg, vfn, log)


def train_species_classifier(head, clips, species, cfg=None, log=None):
    """Softmax species classifier on clips.  Recordings with several audible
    species contribute one of them, drawn uniformly, at every visit."""
    cfg = cfg or TrainConfig()
    cs = _as_clipset(clips)
    if len(species) != len(cs):
        raise DimensionMismatch("clips and species lists differ in length")
    lists = [np.asarray(s, dtype=np.int64) for s in species]
    if any(len(s) == 0 for s in lists):
        raise EmptyDataset("a recording has no species label")
    if max(int(s.max()) for s in lists) >= head.net.d_out:
        raise DimensionMismatch(f"species id out of range for a {head.net.d_out}-way head")
    head.norm = Standardizer.fit(cs.data)

    def step(idx, rng):
        x = cs.draw(rng, idx)
        lab = np.array([lists[i][int(rng.integers(len(lists[i])))] for i in idx])
        return head.loss_grad(x, lab)

    return fit(head.params, len(cs), step, cfg, None, log)


def _pooled_probs(head, cs):
    # recording-level distribution: mean of clip distributions
    return np.stack([head.probs(cs.recording(i)).mean(axis=0) for i in range(len(cs))])


def predict_classification(heads, clips, grid, mode="flat"):
    """Cell-centre predictions, shape (n, 2).

    ``flat`` decodes the finest supplied head on its own; ``hierarchical``
    walks coarse to fine, restricting each argmax to the children of the
    cell chosen one level up.  Heads must be ordered by level.
    """
    cs = _as_clipset(clips)
    probs = [_pooled_probs(h, cs) for h in heads]
    cells = decode_cells(probs, heads, grid, mode)
    lat, lon = grid.centers(heads[-1].level, cells[:, -1])
    return np.column_stack([lat, lon])


def decode_cells(probs, heads, grid, mode):
    """Chosen cell id per level, shape (n, n_levels)."""
    n = probs[0].shape[0]
    if mode == "flat":
        return np.column_stack([p.argmax(axis=1) for p in probs])
    if mode != "hierarchical":
        raise ValueError(f"unknown decoding mode {mode!r}")
    out = np.zeros((n, len(heads)), dtype=np.int64)
    out[:, 0] = probs[0].argmax(axis=1)
    for j in range(1, len(heads)):
        lvl_up, lvl = heads[j - 1].level, heads[j].level
        for i in range(n):
            cand = [out[i, j - 1]]
            for L in range(lvl_up, lvl):
                cand = [c for p in cand for c in grid.children(L, int(p))]
            cand = np.array(cand)
            out[i, j] = cand[np.argmax(probs[j][i, cand])]
    return out


# -- retrieval ------------------------------------------------------------

class RetrievalHead:
    """Shared adapter, then a location decoder MLP(d -> 512) and a checklist
    decoder MLP(d -> S).

    The adapter is a trainable d x d linear map initialised to the identity.
    It stands in for the last trainable layer of the audio encoder, so the
    checklist loss shapes the features the location decoder sees.
    """

    kind = "retrieval"

    def __init__(self, d_in=1280, n_species=500, loc_dim=512, bce_weight=0.01, seed=0):
        rng = np.random.default_rng(seed)
        self.ada = Mlp(d_in, d_in, rng=rng)
        self.ada.params["w1"][...] = np.eye(d_in)
        self.loc = Mlp(d_in, loc_dim, hidden=(128,), rng=rng)
        self.chk = Mlp(d_in, n_species, hidden=(128,), rng=rng)
        self.bce_weight = float(bce_weight)
        self.norm = Standardizer.identity(d_in)

    @property
    def params(self):
        p = OrderedDict(("ada." + k, v) for k, v in self.ada.params.items())
        p.update(("loc." + k, v) for k, v in self.loc.params.items())
        p.update(("chk." + k, v) for k, v in self.chk.params.items())
        return p

    def features(self, x):
        return self.ada(self.norm(x))

    def embed(self, x):
        return l2_normalize(self.loc(self.features(x)))[0]

    def checklist_logits(self, x):
        return self.chk(self.features(x))

    def loss_grad(self, x, loc_emb, checklists, temperature):
        h, hacts = self.ada.forward(self.norm(x), keep=True)
        raw, acts = self.loc.forward(h, keep=True)
        z, nrm = l2_normalize(raw)
        loss, (gz, _) = loss_info_nce(z, loc_emb, temperature)
        g_loc, gh = self.loc.backward(acts, l2_normalize_backward(raw, nrm, gz))
        if self.bce_weight > 0:
            logits, cacts = self.chk.forward(h, keep=True)
            bl, gb = loss_bce_logits(logits, checklists)
            g_chk, gh_chk = self.chk.backward(cacts, self.bce_weight * gb)
            gh = gh + gh_chk
            loss += self.bce_weight * bl
        else:
            g_chk = OrderedDict((k, np.zeros_like(v)) for k, v in self.chk.params.items())
        g_ada, _ = self.ada.backward(hacts, gh)
        grads = OrderedDict(("ada." + k, v) for k, v in g_ada.items())
        grads.update(("loc." + k, v) for k, v in g_loc.items())
        grads.update(("chk." + k, v) for k, v in g_chk.items())
        return loss, grads

    def state_dict(self):
        d = _state(self.loc, self.norm, "loc.")
        d.update(("ada." + k, v) for k, v in self.ada.params.items())
        d.update(("chk." + k, v) for k, v in self.chk.params.items())
        d["bce_weight"] = np.array([self.bce_weight])
        return d

    def load_state_dict(self, d):
        _load(self.loc, self.norm, d, "loc.")
        for net, pre in ((self.ada, "ada."), (self.chk, "chk.")):
            for k in net.params:
                net.params[k] = np.array(d[pre + k])
        self.bce_weight = float(d["bce_weight"][0])


def train_retrieval(head, clips, locations, checklists, loc_encoder, cfg=None, val=None, log=None):
    cfg = cfg or TrainConfig()
    cs = _as_clipset(clips)
    y = _coords(locations)
    if checklists is None:
        if head.bce_weight > 0:
            raise DimensionMismatch("checklist targets are required when bce_weight > 0")
        checklists = np.zeros((len(cs), head.chk.d_out), dtype=np.uint8)
    checklists = np.asarray(checklists)
    if checklists.shape != (len(cs), head.chk.d_out):
        raise DimensionMismatch(f"checklists have shape {checklists.shape}, head expects "
                                f"({len(cs)}, {head.chk.d_out})")
    if len(y) != len(cs):
        raise DimensionMismatch("clips and locations differ in length")
    head.norm = Standardizer.fit(cs.data)
    targets = loc_encoder.encode_many(y[:, 0], y[:, 1])

    def step(idx, rng):
        return head.loss_grad(cs.draw(rng, idx), targets[idx], checklists[idx], cfg.temperature)

    vfn = _retrieval_val(head, val, loc_encoder, y, targets)
    return fit(head.params, len(cs), step, cfg, vfn, log)


def _retrieval_val(model, val, loc_encoder, train_y, train_emb):
    if val is None:
        return None
    vcs, vt = _as_clipset(val[0]), _coords(val[1])

    def vfn():
        q = predict_embeddings(model, vcs)
        pick = np.argmax(q @ train_emb.T, axis=1)
        return _median_km(train_y[pick], vt)

    return vfn


# -- checklist probe ------------------------------------------------------

class ChecklistProbe:
    """Linear(S -> 512) from a species checklist to a location embedding."""

    kind = "checklist-probe"

    def __init__(self, n_species, loc_dim=512, seed=0):
        self.net = Mlp(n_species, loc_dim, seed=seed)
        self.norm = Standardizer.identity(n_species)

    @property
    def params(self):
        return self.net.params

    def embed(self, x):
        return l2_normalize(self.net(np.asarray(x, dtype=np.float64)))[0]

    def loss_grad(self, x, loc_emb, temperature):
        raw, acts = self.net.forward(np.asarray(x, dtype=np.float64), keep=True)
        z, nrm = l2_normalize(raw)
        loss, (gz, _) = loss_info_nce(z, loc_emb, temperature)
        grads, _ = self.net.backward(acts, l2_normalize_backward(raw, nrm, gz))
        return loss, grads

    def state_dict(self):
        return _state(self.net, self.norm)

    def load_state_dict(self, d):
        _load(self.net, self.norm, d)


def train_checklist_probe(probe, checklists, locations, loc_encoder, cfg=None, val=None, log=None):
    cfg = cfg or TrainConfig()
    x = np.asarray(checklists, dtype=np.float64)
    y = _coords(locations)
    if len(x) == 0:
        raise EmptyDataset("empty dataset")
    if x.shape[1] != probe.net.d_in:
        raise DimensionMismatch(f"checklists have {x.shape[1]} species, probe expects {probe.net.d_in}")
    targets = loc_encoder.encode_many(y[:, 0], y[:, 1])

    def step(idx, rng):
        return probe.loss_grad(x[idx], targets[idx], cfg.temperature)

    vfn = None
    if val is not None:
        vx, vt = np.asarray(val[0], dtype=np.float64), _coords(val[1])

        def vfn():
            pick = np.argmax(probe.embed(vx) @ targets.T, axis=1)
            return _median_km(y[pick], vt)

    return fit(probe.params, len(x), step, cfg, vfn, log)


# -- shared helpers -------------------------------------------------------

def predict_embeddings(model, clips, pool="average"):
    """Recording-level location embeddings (retrieval head) pooled over clips."""
    from .geolocate import pool_clips
    cs = _as_clipset(clips)
    return np.stack([pool_clips(model.embed(cs.recording(i)), pool) for i in range(len(cs))])


def predict_recordings(head, clips):
    """Regression: mean of clip predictions per recording, wrapped."""
    cs = _as_clipset(clips)
    out = np.empty((len(cs), 2))
    for i in range(len(cs)):
        y = head.raw(cs.recording(i)).mean(axis=0)
        out[i] = [min(90.0, max(-90.0, y[0])), wrap_lon(y[1])]
    return out


def _state(net, norm, prefix=""):
    d = OrderedDict((prefix + k, v) for k, v in net.params.items())
    d[prefix + "in_mean"] = norm.mean
    d[prefix + "in_scale"] = norm.scale
    return d


def _load(net, norm, d, prefix=""):
    for k in net.params:
        net.params[k] = np.array(d[prefix + k])
    norm.mean = np.array(d[prefix + "in_mean"])
    norm.scale = np.array(d[prefix + "in_scale"])


def save_head(path, head):
    save_checkpoint(path, head.state_dict())


def load_head_weights(path, head):
    head.load_state_dict(load_checkpoint(path))
    return head
