import numpy as np
import pytest

from audiogeo.audio import SAMPLE_RATE, Waveform, slice_windows
from audiogeo.encoders import (AUDIO_DIM, N_STATS, BaselineFeaturizer, FourierLocationEncoder, check_dim,
                               encode_location, featurize, load_embeddings, read_embeddings_array,
                               save_embeddings, summary_stats)
from audiogeo.errors import CorruptEmbeddingFile, DimensionMismatch
from audiogeo.geodesy import GeoCoordinate, destination
from audiogeo.synthworld import WorldSpec, generate_world, tone_audio

from conftest import random_points


def test_location_embeddings_unit_norm(rng):
    enc = FourierLocationEncoder(0)
    la, lo = random_points(rng, 10000)
    e = enc.encode_many(la, lo)
    assert e.shape == (10000, 512)
    assert np.allclose(np.linalg.norm(e, axis=1), 1.0, atol=1e-12)


def test_location_periodic_and_deterministic():
    enc = FourierLocationEncoder(4)
    a = enc.encode_many([12.0], [-170.0])
    b = enc.encode_many([12.0], [190.0])
    assert np.allclose(a, b, atol=1e-12)
    assert np.array_equal(a, FourierLocationEncoder(4).encode_many([12.0], [-170.0]))
    assert np.allclose(encode_location(enc, GeoCoordinate(12.0, -170.0)), a[0])


def test_location_seam_continuous():
    enc = FourierLocationEncoder(1)
    e = enc.encode_many([40.0, 40.0], [179.999, -179.999])
    assert e[0] @ e[1] > 0.999


def test_nearby_more_similar_than_distant():
    near, far = [], []
    for seed in range(100):
        enc = FourierLocationEncoder(seed)
        rng = np.random.default_rng(seed)
        la, lo = random_points(rng, 1)
        la1, lo1 = destination(la, lo, rng.uniform(0, 360), 1.0)
        la2, lo2 = destination(la, lo, rng.uniform(0, 360), 10000.0)
        e = enc.encode_many(np.r_[la, la1, la2], np.r_[lo, lo1, lo2])
        near.append(e[0] @ e[1])
        far.append(e[0] @ e[2])
    assert np.mean(near) > np.mean(far)


def test_encoder_save_load(tmp_path):
    enc = FourierLocationEncoder(9)
    enc.save(tmp_path / "enc.s2lw")
    back = FourierLocationEncoder.load(tmp_path / "enc.s2lw")
    assert np.array_equal(back.encode_many([1.0, 50.0], [2.0, -3.0]), enc.encode_many([1.0, 50.0], [2.0, -3.0]))


def test_bad_frequency_count():
    with pytest.raises(ValueError):
        FourierLocationEncoder(n_freq=63)


# -- featurizer ---------------------------------------------------------------

def test_summary_stats_layout(rng):
    f = rng.random((513, 128))
    s = summary_stats(f)
    assert s.shape == (N_STATS,) == (402,)
    assert np.allclose(s[:128], f.mean(axis=0))
    assert np.allclose(s[128:256], f.std(axis=0))
    assert np.allclose(s[256:384], f.max(axis=0))
    assert np.all(np.diff(s[384:394]) >= 0)  # quantiles ascend


def test_silence_gives_bias_column():
    b = BaselineFeaturizer(0)
    clip = slice_windows(Waveform(np.zeros(3 * SAMPLE_RATE), SAMPLE_RATE))[0]
    assert np.all(summary_stats(clip.spec.frames) == 0)
    assert np.allclose(featurize(b, clip), b.projection[:, -1])


def test_identical_clips_identical_embeddings(rng):
    b = BaselineFeaturizer(0)
    x = rng.normal(size=3 * SAMPLE_RATE) * 0.1
    c1 = slice_windows(Waveform(x, SAMPLE_RATE))[0]
    c2 = slice_windows(Waveform(x.copy(), SAMPLE_RATE))[0]
    assert np.array_equal(b.featurize(c1), b.featurize(c2))
    assert b.featurize(c1).shape == (AUDIO_DIM,)


def test_species_signatures_separable():
    world = generate_world(WorldSpec(seed=0, n_species=60, n_sites=0))
    b = BaselineFeaturizer(0)
    rng = np.random.default_rng(0)

    def emb(s):
        w = tone_audio(world, [s], rng, 3.0)
        v = b.featurize_waveform(w)[0]
        return v / np.linalg.norm(v)

    cache = {}
    same, diff = [], []
    for _ in range(1000):
        s, t = rng.choice(60, size=2, replace=False)
        if s not in cache:
            cache[s] = [emb(s) for _ in range(4)]
        if t not in cache:
            cache[t] = [emb(t) for _ in range(4)]
        i, j = rng.choice(4, size=2, replace=False)
        same.append(cache[s][i] @ cache[s][j])
        diff.append(cache[s][i] @ cache[t][j])
    assert np.mean(diff) < np.mean(same)


# -- embedding files ------------------------------------------------------------

def test_embeddings_round_trip(tmp_path, rng):
    recs = [(7, 0, rng.normal(size=16).astype(np.float32)), (7, 1, rng.normal(size=16).astype(np.float32)),
            (2 ** 40, 0, rng.normal(size=16).astype(np.float32))]
    save_embeddings(tmp_path / "e.bin", recs)
    back = load_embeddings(tmp_path / "e.bin")
    assert [(r, c) for r, c, _ in back] == [(7, 0), (7, 1), (2 ** 40, 0)]
    for (_, _, a), (_, _, b) in zip(recs, back):
        assert np.array_equal(a, b)
    ids, clips, vecs = read_embeddings_array(tmp_path / "e.bin")
    assert vecs.dtype == np.float32 and vecs.shape == (3, 16)


def test_empty_embedding_file(tmp_path):
    save_embeddings(tmp_path / "e.bin", [], dim=1280)
    assert load_embeddings(tmp_path / "e.bin") == []
    assert (tmp_path / "e.bin").stat().st_size == 12


def test_corrupt_embedding_files(tmp_path, rng):
    save_embeddings(tmp_path / "e.bin", [(1, 0, rng.normal(size=8))])
    raw = (tmp_path / "e.bin").read_bytes()
    (tmp_path / "t.bin").write_bytes(raw[:-1])
    (tmp_path / "m.bin").write_bytes(b"NOPE" + raw[4:])
    for name in ("t.bin", "m.bin"):
        with pytest.raises(CorruptEmbeddingFile):
            load_embeddings(tmp_path / name)


def test_dimension_checks(tmp_path, rng):
    save_embeddings(tmp_path / "e.bin", [(1, 0, rng.normal(size=512))])
    with pytest.raises(DimensionMismatch):
        load_embeddings(tmp_path / "e.bin", expected_dim=1280)
    with pytest.raises(DimensionMismatch):
        check_dim(1280, 512)
    with pytest.raises(DimensionMismatch):
        save_embeddings(tmp_path / "x.bin", [(1, 0, np.zeros(3))], dim=4)
