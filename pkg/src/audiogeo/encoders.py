"""Audio featurizer and location encoder.

The CNN audio backbone is not part of this toolkit; ``BaselineFeaturizer``
stands in for it with summary statistics of the log-mel spectrogram pushed
through a seeded random projection, and ``load_embeddings`` accepts features
computed elsewhere.
"""

import struct

import numpy as np

from .audio import N_MELS, slice_windows
from .errors import CorruptEmbeddingFile, DimensionMismatch
from .geodesy import to_unit_vectors
from .numkit import Mlp, HIDDEN, l2_normalize, load_checkpoint, save_checkpoint

AUDIO_DIM = 1280
LOC_DIM = 512
EMB_MAGIC = b"S2LE"


class FourierLocationEncoder:
    """Unit-sphere lift -> random Fourier features -> MLP -> unit norm."""

    def __init__(self, seed=0, n_freq=64, scales=(1.0, 4.0, 16.0, 64.0), dim=LOC_DIM):
        if n_freq % len(scales):
            raise ValueError("n_freq must be a multiple of the number of scales")
        rng = np.random.default_rng(seed)
        per = n_freq // len(scales)
        self.seed = seed
        self.freq = np.concatenate([rng.normal(0.0, s, size=(per, 3)) for s in scales])
        self.head = Mlp(2 * n_freq, dim, hidden=(HIDDEN,), rng=rng)

    @property
    def dim(self):
        return self.head.d_out

    def features(self, lat, lon):
        x = to_unit_vectors(lat, lon).reshape(-1, 3)
        proj = x @ self.freq.T
        return np.concatenate([np.sin(proj), np.cos(proj)], axis=1)

    def encode_many(self, lat, lon, chunk=8192):
        lat = np.atleast_1d(np.asarray(lat, dtype=float))
        lon = np.atleast_1d(np.asarray(lon, dtype=float))
        out = np.empty((len(lat), self.dim))
        for i in range(0, len(lat), chunk):
            out[i:i + chunk] = l2_normalize(self.head(self.features(lat[i:i + chunk], lon[i:i + chunk])))[0]
        return out

    def state_dict(self):
        d = {"freq": self.freq}
        d.update({f"head.{k}": v for k, v in self.head.params.items()})
        return d

    def load_state_dict(self, d):
        self.freq = np.array(d["freq"])
        for k in self.head.params:
            self.head.params[k] = np.array(d[f"head.{k}"])

    def save(self, path):
        save_checkpoint(path, self.state_dict())

    @classmethod
    def load(cls, path):
        d = load_checkpoint(path)
        enc = cls(n_freq=d["freq"].shape[0], dim=d["head.b2"].shape[0])
        enc.load_state_dict(d)
        return enc


def encode_location(enc, p):
    return enc.encode_many([p.lat_deg], [p.lon_deg])[0]


# -- audio features -------------------------------------------------------

N_QUANTILES = 10
N_STATS = 3 * N_MELS + N_QUANTILES + 8


def summary_stats(frames):
    """Fixed-length description of a (n_frames, 128) log-mel matrix."""
    f = np.asarray(frames, dtype=np.float64)
    energy = f.mean(axis=1)
    q = np.quantile(energy, (np.arange(N_QUANTILES) + 0.5) / N_QUANTILES)
    bins = np.arange(f.shape[1]) / f.shape[1]
    shape = []
    for part in np.array_split(f, 4, axis=0):
        w = part.sum(axis=0)
        tot = w.sum()
        if tot <= 0:
            shape += [0.0, 0.0]
            continue
        c = float((w * bins).sum() / tot)
        shape += [c, float(np.sqrt((w * (bins - c) ** 2).sum() / tot))]
    return np.concatenate([f.mean(axis=0), f.std(axis=0), f.max(axis=0), q, shape])


class BaselineFeaturizer:
    """Seeded random projection of spectrogram statistics to 1280 dims."""

    def __init__(self, seed=0, dim=AUDIO_DIM):
        rng = np.random.default_rng(seed)
        self.seed = seed
        # last column is the bias, hit by the constant 1 appended to the stats
        self.projection = rng.normal(0.0, 1.0 / np.sqrt(N_STATS + 1), size=(dim, N_STATS + 1))

    def featurize_frames(self, frames):
        return self.projection @ np.append(summary_stats(frames), 1.0)

    def featurize(self, clip):
        return self.featurize_frames(clip.spec.frames)

    def featurize_waveform(self, w):
        """One embedding per clip window, shape (n_windows, 1280)."""
        return np.stack([self.featurize(c) for c in slice_windows(w)])


def featurize(b, clip):
    return b.featurize(clip)


# -- embedding files ------------------------------------------------------

def save_embeddings(path, records, dim=None):
    """records: iterable of (recording_id, clip_index, vector)."""
    records = list(records)
    if dim is None:
        dim = len(records[0][2]) if records else AUDIO_DIM
    with open(path, "wb") as fh:
        fh.write(EMB_MAGIC + struct.pack("<II", len(records), dim))
        for rid, ci, vec in records:
            vec = np.asarray(vec, dtype="<f4")
            if vec.shape != (dim,):
                raise DimensionMismatch(f"record {rid}/{ci} has shape {vec.shape}, expected ({dim},)")
            fh.write(struct.pack("<QI", int(rid), int(ci)) + vec.tobytes())


def read_embeddings_array(path):
    """Vectorised reader: (ids u64, clip_index u32, vectors float32 (n, dim))."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12 or raw[:4] != EMB_MAGIC:
        raise CorruptEmbeddingFile(f"{path}: bad magic")
    count, dim = struct.unpack_from("<II", raw, 4)
    rec = np.dtype([("id", "<u8"), ("clip", "<u4"), ("vec", "<f4", (dim,))])
    if len(raw) != 12 + count * rec.itemsize:
        raise CorruptEmbeddingFile(f"{path}: expected {count} records of dim {dim}, file size disagrees")
    arr = np.frombuffer(raw, dtype=rec, count=count, offset=12)
    return arr["id"].copy(), arr["clip"].copy(), arr["vec"].reshape(count, dim).copy()


def load_embeddings(path, expected_dim=None):
    ids, clips, vecs = read_embeddings_array(path)
    if expected_dim is not None and vecs.shape[1] != expected_dim:
        raise DimensionMismatch(f"{path}: dim {vecs.shape[1]} != expected {expected_dim}")
    return [(int(i), int(c), v) for i, c, v in zip(ids, clips, vecs)]


def check_dim(head_in, emb_dim):
    if head_in != emb_dim:
        raise DimensionMismatch(f"head expects {head_in}-dim embeddings, got {emb_dim}")
