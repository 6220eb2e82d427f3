"""Small float64 numeric kernel: dense heads with manual backprop, the
geolocation losses, Nesterov SGD and a finite-difference gradient checker."""

import math
import struct
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .errors import BatchTooSmall, CorruptCheckpoint, LabelError, ShapeError
from .geodesy import EARTH_RADIUS_KM

HIDDEN = 128
CKPT_MAGIC = b"S2LW"


def glorot(rng, fan_in, fan_out):
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


class Mlp:
    """Affine layers with ReLU between them.

    ``Mlp(d_in, d_out)`` is a single linear layer; ``Mlp(d_in, d_out,
    hidden=(128,))`` is the two-layer head.  Parameters are ``w{i}``/``b{i}``
    with weights stored (fan_in, fan_out) so that ``y = x @ w + b``.
    """

    def __init__(self, d_in, d_out, hidden=(), rng=None, seed=0):
        rng = np.random.default_rng(seed) if rng is None else rng
        self.sizes = [int(d_in), *[int(h) for h in hidden], int(d_out)]
        self.params = OrderedDict()
        for i, (a, b) in enumerate(zip(self.sizes[:-1], self.sizes[1:]), start=1):
            self.params[f"w{i}"] = glorot(rng, a, b)
            self.params[f"b{i}"] = np.zeros(b)

    @property
    def d_in(self):
        return self.sizes[0]

    @property
    def d_out(self):
        return self.sizes[-1]

    @property
    def n_layers(self):
        return len(self.sizes) - 1

    def n_params(self):
        return sum(p.size for p in self.params.values())

    def forward(self, x, keep=False):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.d_in:
            raise ShapeError(f"expected (n, {self.d_in}) input, got {x.shape}")
        acts = [x]
        h = x
        for i in range(1, self.n_layers + 1):
            h = h @ self.params[f"w{i}"] + self.params[f"b{i}"]
            if i < self.n_layers:
                h = np.maximum(h, 0.0)
            acts.append(h)
        return (h, acts) if keep else h

    __call__ = forward

    def backward(self, acts, upstream):
        grads = OrderedDict()
        g = np.asarray(upstream, dtype=np.float64)
        for i in range(self.n_layers, 0, -1):
            if i < self.n_layers:
                g = g * (acts[i] > 0)
            grads[f"w{i}"] = acts[i - 1].T @ g
            grads[f"b{i}"] = g.sum(axis=0)
            g = g @ self.params[f"w{i}"].T
        return OrderedDict((k, grads[k]) for k in self.params), g


def mlp_head(d_in, d_out, seed=0):
    return Mlp(d_in, d_out, hidden=(HIDDEN,), seed=seed)


def forward_backward(head, x, upstream_grad):
    """Returns (y, param_grads, x_grad) for the upstream gradient dL/dy."""
    y, acts = head.forward(x, keep=True)
    upstream_grad = np.asarray(upstream_grad, dtype=np.float64)
    if upstream_grad.shape != y.shape:
        raise ShapeError(f"upstream gradient {upstream_grad.shape} != output {y.shape}")
    grads, gx = head.backward(acts, upstream_grad)
    return y, grads, gx


def l2_normalize(x, eps=1e-12):
    x = np.asarray(x, dtype=np.float64)
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.maximum(norm, eps), norm


def l2_normalize_backward(x, norm, grad_out, eps=1e-12):
    """Gradient through x -> x/|x| given the forward-pass norm.

    Rows whose norm is below ``eps`` have no direction to move along and get
    a zero gradient (the clamped forward would otherwise scale it by 1/eps).
    """
    n = np.maximum(norm, eps)
    u = x / n
    g = (grad_out - u * np.sum(grad_out * u, axis=-1, keepdims=True)) / n
    return np.where(norm < eps, 0.0, g)


# -- losses ---------------------------------------------------------------

def _targets_array(target):
    if isinstance(target, np.ndarray):
        return np.asarray(target, dtype=np.float64).reshape(-1, 2)
    return np.array([[t.lat_deg, t.lon_deg] for t in target], dtype=np.float64).reshape(-1, 2)


def loss_haversine(pred_deg, target):
    """Mean great-circle distance (km) between raw predictions and targets."""
    pred = np.asarray(pred_deg, dtype=np.float64)
    tgt = _targets_array(target)
    if pred.shape != tgt.shape:
        raise ShapeError(f"prediction {pred.shape} vs target {tgt.shape}")
    n = len(pred)
    r = math.pi / 180.0
    p1, l1 = pred[:, 0] * r, pred[:, 1] * r
    p2, l2 = tgt[:, 0] * r, tgt[:, 1] * r
    a = np.sin((p1 - p2) / 2) ** 2 + np.cos(p1) * np.cos(p2) * np.sin((l1 - l2) / 2) ** 2
    eps = 1e-12
    ac = np.clip(a, eps, 1 - eps)
    d = 2 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))
    # dd/da for d = 2R asin(sqrt(a))
    dd_da = EARTH_RADIUS_KM / np.sqrt(ac * (1 - ac))
    dd_da = np.where((a < eps) | (a > 1 - eps), 0.0, dd_da)
    da_dp1 = 0.5 * np.sin(p1 - p2) - np.sin(p1) * np.cos(p2) * np.sin((l1 - l2) / 2) ** 2
    da_dl1 = 0.5 * np.cos(p1) * np.cos(p2) * np.sin(l1 - l2)
    grad = np.stack([dd_da * da_dp1, dd_da * da_dl1], axis=1) * (r / n)
    return float(d.mean()), grad


def loss_euclidean(pred_deg, target):
    pred = np.asarray(pred_deg, dtype=np.float64)
    tgt = _targets_array(target)
    if pred.shape != tgt.shape:
        raise ShapeError(f"prediction {pred.shape} vs target {tgt.shape}")
    diff = pred - tgt
    dist = np.linalg.norm(diff, axis=1)
    safe = np.where(dist > 0, dist, 1.0)
    grad = np.where(dist[:, None] > 0, diff / safe[:, None], 0.0) / len(pred)
    return float(dist.mean()), grad


def log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax(z):
    return np.exp(log_softmax(np.asarray(z, dtype=np.float64)))


def loss_softmax_ce(logits, labels):
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, c = z.shape
    if len(y) != n:
        raise ShapeError("labels and logits disagree on batch size")
    if y.size and (y.min() < 0 or y.max() >= c):
        raise LabelError(f"label outside [0, {c})")
    lp = log_softmax(z)
    loss = -lp[np.arange(n), y].mean()
    grad = np.exp(lp)
    grad[np.arange(n), y] -= 1.0
    return float(loss), grad / n


def loss_bce_logits(logits, targets):
    z = np.asarray(logits, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if z.shape != t.shape:
        raise ShapeError(f"logits {z.shape} vs targets {t.shape}")
    # max(z,0) - z t + log(1 + exp(-|z|))
    loss = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    sig = np.where(z >= 0, 1 / (1 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1 + np.exp(-np.abs(z))))
    return float(loss.mean()), (sig - t) / z.size


def loss_info_nce(audio_emb, loc_emb, temperature=0.07):
    """Symmetric InfoNCE with in-batch negatives; rows are assumed unit-norm.

    Returns (loss, (grad_audio, grad_loc)).
    """
    a = np.asarray(audio_emb, dtype=np.float64)
    b = np.asarray(loc_emb, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"audio {a.shape} vs location {b.shape}")
    n = a.shape[0]
    if n < 2:
        raise BatchTooSmall("InfoNCE needs at least two pairs")
    s = a @ b.T / temperature
    idx = np.arange(n)
    lr = log_softmax(s)          # audio -> location
    lc = log_softmax(s.T)        # location -> audio
    loss = -0.5 * (lr[idx, idx].mean() + lc[idx, idx].mean())
    gs = np.exp(lr)
    gs[idx, idx] -= 1.0
    gc = np.exp(lc)
    gc[idx, idx] -= 1.0
    gs = 0.5 * (gs + gc.T) / n / temperature
    return float(loss), (gs @ b, gs.T @ a)


# -- optimisation ---------------------------------------------------------

@dataclass
class SgdState:
    momentum: float = 0.9
    weight_decay: float = 1e-5
    nesterov: bool = True
    buffers: dict = field(default_factory=dict)


def sgd_step(params, grads, state, lr):
    """In-place Nesterov SGD step with L2 weight decay added to the gradient."""
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter {name} {p.shape}")
        g = g + state.weight_decay * p
        if state.momentum:
            buf = state.buffers.get(name)
            buf = g.copy() if buf is None else state.momentum * buf + g
            state.buffers[name] = buf
            g = g + state.momentum * buf if state.nesterov else buf
        p -= lr * g
    return params


@dataclass
class LrSchedule:
    lr_start: float = 1e-3
    lr_peak: float = 1e-2
    lr_end: float = 1e-3
    warmup_epochs: float = 5.0
    total_epochs: float = 50.0

    def __call__(self, epoch):
        """Learning rate at a (fractional) epoch."""
        e = float(epoch)
        if e <= self.warmup_epochs:
            if self.warmup_epochs <= 0:
                return self.lr_peak
            f = e / self.warmup_epochs
            return self.lr_start * (1.0 - f) + self.lr_peak * f
        span = self.total_epochs - self.warmup_epochs
        t = min(1.0, (e - self.warmup_epochs) / span) if span > 0 else 1.0
        return self.lr_end + 0.5 * (self.lr_peak - self.lr_end) * (1 + math.cos(math.pi * t))


def grad_check(f, theta, h=1e-5):
    """Max relative error between f's analytic gradient and central differences.

    ``f(theta)`` must return ``(value, grad)``.
    """
    theta = np.array(theta, dtype=np.float64)
    _, analytic = f(theta.copy())
    analytic = np.asarray(analytic, dtype=np.float64).reshape(theta.shape)
    numeric = np.zeros_like(theta)
    flat = theta.reshape(-1)
    num = numeric.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(theta.copy())[0]
        flat[i] = old - h
        fm = f(theta.copy())[0]
        flat[i] = old
        num[i] = (fp - fm) / (2 * h)
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom)) if theta.size else 0.0


# -- checkpoints ----------------------------------------------------------

def save_checkpoint(path, params):
    """Write named arrays: u32 count, then per array u32 name length, name,
    u32 ndim, u32 shape[ndim], f64 data (all little-endian)."""
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<I", len(params)))
        for name, arr in params.items():
            arr = np.asarray(arr, dtype="<f8")  # tobytes() is C order; keeps 0-d shapes
            key = name.encode("utf-8")
            fh.write(struct.pack("<I", len(key)) + key)
            fh.write(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CKPT_MAGIC:
        raise CorruptCheckpoint(f"{path}: not a weight checkpoint")
    out = OrderedDict()
    try:
        (count,), pos = struct.unpack_from("<I", raw, 4), 8
        for _ in range(count):
            (ln,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            name = raw[pos:pos + ln].decode("utf-8")
            pos += ln
            (nd,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            shape = struct.unpack_from(f"<{nd}I", raw, pos)
            pos += 4 * nd
            size = int(np.prod(shape)) if nd else 1
            if pos + 8 * size > len(raw):
                raise ValueError("truncated")
            out[name] = np.frombuffer(raw, dtype="<f8", count=size, offset=pos).reshape(shape).copy()
            pos += 8 * size
    except (struct.error, ValueError) as exc:
        raise CorruptCheckpoint(f"{path}: corrupt checkpoint ({exc})") from exc
    return out
