import numpy as np
import pytest

from audiogeo.encoders import FourierLocationEncoder
from audiogeo.errors import DimensionMismatch, EmptyDataset
from audiogeo.geodesy import haversine_np
from audiogeo.heads import (ChecklistProbe, ClassificationHead, ClipSet, RegressionHead, RetrievalHead, TrainConfig,
                            decode_cells, load_head_weights, predict_classification, predict_embeddings,
                            predict_recordings, save_head, train_checklist_probe, train_classification,
                            train_regression, train_retrieval, train_species_classifier, write_loss_log)
from audiogeo.numkit import LrSchedule, grad_check

from conftest import random_points

ENC = FourierLocationEncoder(0)


def cfg(epochs=10, seed=0, batch=128, **kw):
    return TrainConfig(seed=seed, batch_size=batch,
                       schedule=LrSchedule(total_epochs=epochs, warmup_epochs=epochs / 10), **kw)


def coords(rng, n):
    return np.column_stack(random_points(rng, n))


# -- data -----------------------------------------------------------------

def test_clipset(rng):
    clips = [rng.normal(size=(k, 4)) for k in (1, 3, 2)]
    cs = ClipSet(clips)
    assert len(cs) == 3 and cs.dim == 4
    assert np.allclose(cs.recording(1), clips[1].astype(np.float32))
    assert np.allclose(cs.means()[1], clips[1].astype(np.float32).mean(axis=0), atol=1e-6)
    draw = cs.draw(rng, np.array([1, 1, 1, 1, 1]))
    assert all(any(np.array_equal(d, c) for c in cs.recording(1)) for d in draw)
    with pytest.raises(DimensionMismatch):
        ClipSet([np.zeros((1, 4)), np.zeros((1, 5))])
    with pytest.raises(EmptyDataset):
        ClipSet([])


# -- regression -----------------------------------------------------------

@pytest.mark.parametrize("loss", ["haversine", "euclidean"])
def test_regression_memorizes_point(rng, loss):
    x = rng.normal(size=(64, 8))
    y = np.tile([41.9, 12.5], (64, 1))
    h = RegressionHead(8, loss=loss)
    hist = train_regression(h, x, y, cfg(20))
    p = predict_recordings(h, x)
    assert haversine_np(p[:, 0], p[:, 1], 41.9, 12.5).max() <= 1.0
    losses = [r["train_loss"] for r in hist]
    assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))


def test_regression_learns_linear_map(rng):
    y = np.column_stack([rng.uniform(-50, 50, 400), rng.uniform(-100, 100, 400)])
    x = np.column_stack([y / 50, rng.normal(size=(400, 3))])
    h = RegressionHead(5, loss="haversine")
    hist = train_regression(h, x, y, cfg(60, batch=32))
    assert hist[-1]["train_loss"] < 0.5 * hist[0]["train_loss"]


def test_regression_wraps_at_prediction():
    h = RegressionHead(1)
    h.params["w1"][...] = 0.0
    h.params["b1"][...] = [95.0, 200.0]
    p = h.predict(np.zeros((1, 1)))
    assert p[0, 0] == 90.0 and p[0, 1] == pytest.approx(-160.0)


def test_regression_errors():
    with pytest.raises(ValueError):
        RegressionHead(4, loss="l1")
    with pytest.raises(DimensionMismatch):
        train_regression(RegressionHead(4), np.zeros((3, 4)), np.zeros((2, 2)), cfg(1))


def test_regression_deterministic(rng):
    x, y = rng.normal(size=(50, 6)), coords(rng, 50)
    runs = []
    for _ in range(2):
        h = RegressionHead(6)
        hist = train_regression(h, x, y, cfg(5, batch=16))
        runs.append(([r["train_loss"] for r in hist], h.params["w1"].copy()))
    assert runs[0][0] == runs[1][0] and np.array_equal(runs[0][1], runs[1][1])


# -- classification ---------------------------------------------------------

def test_single_cell_concentrates(rng, grid):
    x = rng.normal(size=(80, 6))
    y = np.tile([48.0, 11.0], (80, 1))
    h = ClassificationHead(6, grid.n_cells(0), level=0)
    c_ = TrainConfig(batch_size=16, schedule=LrSchedule(lr_peak=0.5, total_epochs=30, warmup_epochs=1))
    train_classification(h, x, y, grid, cfg=c_)
    c = grid.locate(0, [48.0], [11.0])[0]
    assert h.probs(x)[:, c].min() > 0.99


def test_one_hot_features_separable(rng, grid):
    y = coords(rng, 300)
    lab = grid.locate(0, y[:, 0], y[:, 1])
    x = np.eye(grid.n_cells(0))[lab]
    h = ClassificationHead(grid.n_cells(0), grid.n_cells(0), level=0)
    train_classification(h, x, y, grid, cfg=cfg(40, batch=32))
    assert np.array_equal(h.probs(x).argmax(axis=1), lab)


def test_classification_class_count_checked(grid):
    with pytest.raises(DimensionMismatch):
        train_classification(ClassificationHead(3, 10, level=0), np.zeros((2, 3)), np.zeros((2, 2)), grid)


class OracleHead:
    """Stand-in classifier that puts all mass on the true cell."""

    def __init__(self, grid, level, truth):
        self.level = level
        self.p = np.eye(grid.n_cells(level))[grid.locate(level, truth[:, 0], truth[:, 1])]


def test_hierarchical_with_oracle_levels(grid, rng):
    truth = coords(rng, 500)
    heads = [OracleHead(grid, L, truth) for L in range(3)]
    cells = decode_cells([h.p for h in heads], heads, grid, "hierarchical")
    lat, lon = grid.centers(2, cells[:, -1])
    assert np.all(haversine_np(lat, lon, truth[:, 0], truth[:, 1]) <= grid.circumradius(2) + 1e-6)


def test_hierarchical_respects_parents(grid, rng):
    heads = [OracleHead(grid, L, coords(rng, 200)) for L in range(3)]
    probs = [rng.random((200, grid.n_cells(L))) for L in range(3)]
    cells = decode_cells(probs, heads, grid, "hierarchical")
    for L in (1, 2):
        assert np.array_equal(grid.parents(L, cells[:, L]), cells[:, L - 1])
    flat = decode_cells(probs, heads, grid, "flat")
    assert np.array_equal(flat[:, 0], cells[:, 0])
    with pytest.raises(ValueError):
        decode_cells(probs, heads, grid, "beam")


def test_flat_level0_error_can_be_large(grid):
    # the right level-0 cell still leaves points far from its centre
    assert grid.circumradius(0) > 1000


def test_predict_classification_flat(rng, grid):
    y = coords(rng, 200)
    lab = grid.locate(0, y[:, 0], y[:, 1])
    x = np.eye(grid.n_cells(0))[lab]
    h = ClassificationHead(grid.n_cells(0), grid.n_cells(0), level=0)
    train_classification(h, x, y, grid, cfg=cfg(40, batch=32))
    p = predict_classification([h], x, grid, "flat")
    assert np.array_equal(grid.locate(0, p[:, 0], p[:, 1]), lab)


def test_species_classifier(rng):
    species = [[int(s)] for s in rng.integers(0, 5, 200)]
    x = np.eye(5)[[s[0] for s in species]] + 0.01 * rng.normal(size=(200, 5))
    h = ClassificationHead(5, 5)
    train_species_classifier(h, x, species, cfg(30, batch=32))
    assert np.mean(h.probs(x).argmax(axis=1) == [s[0] for s in species]) == 1.0
    with pytest.raises(DimensionMismatch):
        train_species_classifier(h, x, [[9]] * 200, cfg(1))


# -- retrieval ------------------------------------------------------------

def test_retrieval_gradients(rng):
    h = RetrievalHead(6, n_species=4, loc_dim=8, bce_weight=0.3, seed=1)
    x = rng.normal(size=(5, 6))
    e = ENC.encode_many(*random_points(rng, 5))[:, :8]
    e /= np.linalg.norm(e, axis=1, keepdims=True)
    chk = (rng.random((5, 4)) < 0.5).astype(float)
    _, grads = h.loss_grad(x, e, chk, 0.5)
    for name, p in h.params.items():
        def f(theta, name=name):
            old = p.copy()
            p[...] = theta
            v = h.loss_grad(x, e, chk, 0.5)[0]
            p[...] = old
            return v, grads[name]
        assert grad_check(f, p.copy()) <= 1e-4, name


def test_retrieval_bce_zero_is_plain_contrastive(rng):
    x, y = rng.normal(size=(40, 6)), coords(rng, 40)
    chk = (rng.random((40, 4)) < 0.5).astype(np.uint8)
    a = RetrievalHead(6, 4, loc_dim=512, bce_weight=0.0, seed=2)
    b = RetrievalHead(6, 4, loc_dim=512, bce_weight=0.0, seed=2)
    ha = train_retrieval(a, x, y, chk, ENC, cfg(3, batch=8))
    hb = train_retrieval(b, x, y, None, ENC, cfg(3, batch=8))
    assert [r["train_loss"] for r in ha] == [r["train_loss"] for r in hb]
    for k in a.params:
        assert np.array_equal(a.params[k], b.params[k])


def test_retrieval_memorizes_ten(rng):
    x = rng.normal(size=(10, 16))
    y = coords(rng, 10)
    h = RetrievalHead(16, 3, bce_weight=0.01)
    train_retrieval(h, x, y, np.zeros((10, 3)), ENC, cfg(100, batch=10))
    gal = ENC.encode_many(y[:, 0], y[:, 1])
    assert np.array_equal(np.argmax(predict_embeddings(h, x) @ gal.T, axis=1), np.arange(10))


def test_retrieval_unit_norm(rng):
    h = RetrievalHead(12, 3, seed=4)
    z = h.embed(rng.normal(size=(50, 12)) * 100)
    assert np.allclose(np.linalg.norm(z, axis=1), 1.0)


def test_retrieval_checklist_shape_checked(rng):
    with pytest.raises(DimensionMismatch):
        train_retrieval(RetrievalHead(4, 3), np.zeros((5, 4)), coords(rng, 5), np.zeros((5, 2)), ENC, cfg(1))
    with pytest.raises(DimensionMismatch):
        train_retrieval(RetrievalHead(4, 3, bce_weight=0.1), np.zeros((5, 4)), coords(rng, 5), None, ENC, cfg(1))


# -- checklist probe ----------------------------------------------------------

def test_probe_unique_checklists_retrieve_own_location(rng):
    y = coords(rng, 30)
    x = np.eye(30)
    p = ChecklistProbe(30)
    train_checklist_probe(p, x, y, ENC, cfg(100, batch=30))
    gal = ENC.encode_many(y[:, 0], y[:, 1])
    assert np.mean(np.argmax(p.embed(x) @ gal.T, axis=1) == np.arange(30)) >= 0.95


def test_probe_identical_checklists_no_signal(rng):
    y = coords(rng, 200)
    x = np.ones((200, 6))
    p = ChecklistProbe(6)
    train_checklist_probe(p, x, y, ENC, cfg(5, batch=50))
    gal = ENC.encode_many(y[:, 0], y[:, 1])
    pick = np.argmax(p.embed(x) @ gal.T, axis=1)
    assert len(set(pick.tolist())) == 1  # every query decodes to the same place
    assert np.allclose(np.linalg.norm(p.embed(x), axis=1), 1.0)


def test_probe_dim_checked(rng):
    with pytest.raises(DimensionMismatch):
        train_checklist_probe(ChecklistProbe(5), np.zeros((3, 4)), coords(rng, 3), ENC)


# -- shared properties ---------------------------------------------------------

def _families(rng, grid):
    x = rng.normal(size=(32, 6))
    y = coords(rng, 32)
    chk = (rng.random((32, 4)) < 0.5).astype(float)
    chk[:, 0] = 1.0  # an empty checklist embeds to the zero vector, where the loss jumps
    emb = ENC.encode_many(y[:, 0], y[:, 1])
    lab = grid.locate(0, y[:, 0], y[:, 1])
    return [
        (RegressionHead(6), lambda h: h.loss_grad(x, y)),
        (ClassificationHead(6, grid.n_cells(0)), lambda h: h.loss_grad(x, lab)),
        (RetrievalHead(6, 4), lambda h: h.loss_grad(x, emb, chk, 0.07)),
        (ChecklistProbe(4), lambda h: h.loss_grad(chk, emb, 0.07)),
    ]


def test_single_step_descends(rng, grid):
    for head, lg in _families(rng, grid):
        before, g = lg(head)
        for k, p in head.params.items():
            p -= 1e-4 * g[k]
        assert lg(head)[0] < before, type(head).__name__


def test_save_load_heads(tmp_path, rng, grid):
    x = rng.normal(size=(7, 6))
    for head, _ in _families(rng, grid):
        for p in head.params.values():
            p += rng.normal(size=p.shape)
        save_head(tmp_path / "h.s2lw", head)
        fresh = type(head)(*((6,) if isinstance(head, RegressionHead) else
                             (6, grid.n_cells(0)) if isinstance(head, ClassificationHead) else
                             (6, 4) if isinstance(head, RetrievalHead) else (4,)))
        load_head_weights(tmp_path / "h.s2lw", fresh)
        for k in head.params:
            assert np.array_equal(fresh.params[k], head.params[k])
    assert np.allclose(fresh.embed(np.eye(4)), head.embed(np.eye(4)))


def test_early_stopping_restores_best(rng, tmp_path):
    x, y = rng.normal(size=(60, 4)), coords(rng, 60)
    h = RegressionHead(4)
    c = cfg(40, batch=16, patience=2)
    hist = train_regression(h, x, y, c, val=(x[:20], y[:20]))
    vals = [r["val_median_km"] for r in hist]
    assert len(hist) <= 40
    pred = predict_recordings(h, x[:20])
    assert np.median(haversine_np(pred[:, 0], pred[:, 1], y[:20, 0], y[:20, 1])) == pytest.approx(min(vals))
    write_loss_log(tmp_path / "log.csv", hist)
    assert (tmp_path / "log.csv").read_text().startswith("epoch,lr,train_loss,val_median_km\n")
