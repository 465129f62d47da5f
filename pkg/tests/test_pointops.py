import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mt3d import macs
from mt3d.config import Config
from mt3d.pointops import (Cloud, fps, init_tokenizer, knn, lexmin_index, tokenize)

seeds = st.integers(0, 2**32 - 1)


def test_cloud_validation():
    with pytest.raises(ValueError):
        Cloud(np.zeros((3, 3)), np.zeros(2))
    with pytest.raises(ValueError):
        Cloud(np.zeros((3, 3)), np.array([0.0, 2.0, 0.5]))


def test_fps_colinear_example():
    pts = np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0], [9, 0, 0]])
    assert fps(pts, 2, start=0).tolist() == [0, 3]
    # brute force: best second point maximises distance to the start
    best = max(range(1, 4), key=lambda j: np.linalg.norm(pts[j] - pts[0]))
    assert best == 3


def test_fps_exhaustion_single_and_padding():
    pts = np.random.default_rng(0).normal(size=(7, 3))
    assert sorted(fps(pts, 7, start=2).tolist()) == list(range(7))
    assert fps(pts, 1, start=4).tolist() == [4]
    padded = fps(pts, 10, start=0)
    assert padded[:7].tolist() == fps(pts, 7, start=0).tolist()
    assert padded[7:].tolist() == padded[:3].tolist()


def test_fps_errors():
    with pytest.raises(ValueError, match="empty input cloud"):
        fps(np.zeros((0, 3)), 3)
    with pytest.raises(IndexError):
        fps(np.zeros((2, 3)), 1, start=5)


def test_fps_default_start_is_lexmin():
    pts = np.array([[1.0, 0, 0], [0, 5, 0], [0, 1, 1], [0, 1, 0], [0, 1, 0]])
    assert lexmin_index(pts) == 3
    assert fps(pts, 1)[0] == 3


@settings(max_examples=60)
@given(st.integers(2, 64), seeds)
def test_fps_is_greedy_max_min(n, seed):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(n, 3))
    m = int(rng.integers(1, n + 1))
    sel = fps(pts, m, start=0)
    assert np.array_equal(sel, fps(pts, m, start=0))
    for i in range(1, m):
        chosen = pts[sel[:i]]
        mind = np.min(np.linalg.norm(pts[:, None] - chosen[None], axis=2), axis=1)
        assert mind[sel[i]] == pytest.approx(mind.max(), abs=1e-12)


def knn_oracle(q, r, k):
    rows = []
    for x in q:
        order = sorted(range(len(r)), key=lambda i: (float(np.sum((r[i] - x) ** 2)), i))
        rows.append(order[:k])
    return np.array(rows)


def test_knn_examples():
    r = np.random.default_rng(1).normal(size=(20, 3))
    nb = knn(r[5:6], r, 1)
    assert nb.idx.tolist() == [[5]] and not nb.padded
    q = np.random.default_rng(2).normal(size=(10, 3))
    assert np.array_equal(knn(q, r, 4).idx, knn_oracle(q, r, 4))


def test_knn_padding():
    r = np.array([[0.0, 0, 0], [1.0, 0, 0]])
    nb = knn(np.array([[0.1, 0, 0]]), r, 4)
    assert nb.padded
    assert nb.idx.tolist() == [[0, 1, 0, 1]]


def test_knn_errors():
    with pytest.raises(ValueError):
        knn(np.zeros((1, 3)), np.zeros((0, 3)), 2)
    with pytest.raises(ValueError):
        knn(np.zeros((1, 3)), np.zeros((4, 3)), 0)


def test_knn_ties_prefer_smaller_index():
    r = np.array([[1.0, 0, 0], [-1.0, 0, 0], [0, 1.0, 0], [0, -1.0, 0], [5, 5, 5]])
    assert knn(np.zeros((1, 3)), r, 3).idx.tolist() == [[0, 1, 2]]


@settings(max_examples=80)
@given(st.integers(1, 256), st.integers(1, 12), seeds)
def test_knn_matches_exhaustive(n_ref, k, seed):
    rng = np.random.default_rng(seed)
    r = np.round(rng.normal(size=(n_ref, 3)), 1)  # rounding creates ties
    q = np.round(rng.normal(size=(6, 3)), 1)
    got = knn(q, r, k)
    if n_ref >= k:
        assert np.array_equal(got.idx, knn_oracle(q, r, k))
    else:
        base = knn_oracle(q, r, n_ref)
        assert np.array_equal(got.idx, base[:, np.arange(k) % n_ref])


def _cfg(**kw):
    return Config(n_tokens=16, channels=8, group_size=4, **kw)


def test_tokenize_shapes_and_identical_points():
    cfg = _cfg()
    w = init_tokenizer(8, np.random.default_rng(0))
    Q, Z = tokenize(np.ones((16, 3)), cfg, w)
    assert Q.shape == (16, 3) and Z.shape == (16, 8)
    assert np.all(Z == Z[0])


def test_tokenize_translation_and_permutation_invariance():
    cfg = _cfg()
    w = init_tokenizer(8, np.random.default_rng(0))
    pts = np.random.default_rng(1).normal(size=(60, 3))
    Q, Z = tokenize(pts, cfg, w)
    Q2, Z2 = tokenize(pts + [3.0, -2.0, 7.0], cfg, w)
    assert np.allclose(Z, Z2, atol=1e-12)
    perm = np.random.default_rng(2).permutation(60)
    Q3, Z3 = tokenize(pts[perm], cfg, w)
    assert np.array_equal(Q, Q3) and np.allclose(Z, Z3, atol=1e-12)


def test_tokenize_single_neighbor_is_zero_embedding():
    cfg = _cfg().replace(group_size=1)
    w = init_tokenizer(8, np.random.default_rng(0))
    _, Z = tokenize(np.random.default_rng(1).normal(size=(30, 3)), cfg, w)
    # at the zero vector: relu(b1) @ w2 + b2
    zero = np.maximum(w.b1, 0) @ w.w2 + w.b2
    assert np.allclose(Z, zero[None], atol=1e-12)
    w.b1 = np.linspace(-1, 1, 4)
    _, Z = tokenize(np.random.default_rng(1).normal(size=(30, 3)), cfg, w)
    assert np.allclose(Z, (np.maximum(w.b1, 0) @ w.w2 + w.b2)[None], atol=1e-12)


def test_tokenize_errors():
    w = init_tokenizer(8, np.random.default_rng(0))
    with pytest.raises(ValueError):
        tokenize(np.zeros((5, 3)), _cfg().replace(channels=16), w)
    with pytest.raises(ValueError, match="empty input cloud"):
        tokenize(np.zeros((0, 3)), _cfg(), w)


def test_tokenize_sparse_cloud_pads():
    cfg = _cfg()
    w = init_tokenizer(8, np.random.default_rng(0))
    Q, Z = tokenize(np.random.default_rng(1).normal(size=(3, 3)), cfg, w)
    assert Q.shape == (16, 3) and np.all(np.isfinite(Z))


def test_random_start_mode_is_seeded():
    w = init_tokenizer(8, np.random.default_rng(0))
    pts = np.random.default_rng(1).normal(size=(50, 3))
    a = tokenize(pts, _cfg(fps_random=True, fps_seed=5), w)[0]
    b = tokenize(pts, _cfg(fps_random=True, fps_seed=5), w)[0]
    assert np.array_equal(a, b)


def test_mac_counting():
    with macs.counting() as c:
        fps(np.random.default_rng(0).normal(size=(10, 3)), 4)
    assert c["fps"] == 3 * 10 * 4
