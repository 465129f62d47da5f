import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mt3d.memory import (MaskEmbedWeights, MemoryBank, MemoryFrame, concat_bank, fuse_mask,
                         init_mask_embed, push)


def frame(rng, n=4, C=6):
    return MemoryFrame(rng.normal(size=(n, 3)), rng.normal(size=(n, C)), rng.uniform(size=(n, 1)))


def test_frame_validation(rng):
    with pytest.raises(ValueError):
        MemoryFrame(np.zeros((3, 3)), np.zeros((2, 4)), np.zeros((3, 1)))
    with pytest.raises(ValueError):
        MemoryFrame(np.zeros((2, 3)), np.zeros((2, 4)), np.array([0.5, 1.5]))


def test_push_fifo(rng):
    bank = MemoryBank(3)
    frames = [frame(rng) for _ in range(5)]
    push(bank, frames[0], 1)
    assert len(bank) == 1
    for t, f in enumerate(frames[1:4], start=2):
        push(bank, f, t)
    assert bank.timestamps == [2, 3, 4]
    push(bank, frames[4], 5)
    assert bank.frames == frames[2:5]


def test_push_rejects_non_increasing(rng):
    bank = MemoryBank(2).push(frame(rng), 3)
    with pytest.raises(ValueError):
        bank.push(frame(rng), 3)
    with pytest.raises(ValueError):
        MemoryBank(0)


@given(st.integers(1, 6), st.lists(st.integers(1, 5), min_size=1, max_size=20))
def test_bank_property(cap, gaps):
    rng = np.random.default_rng(0)
    bank = MemoryBank(cap)
    ts = np.cumsum(gaps).tolist()
    for t in ts:
        bank.push(frame(rng, 2, 2), t)
        assert len(bank) <= cap
    assert bank.timestamps == ts[-cap:]


def test_concat_order_and_slice_back(rng):
    with pytest.raises(ValueError, match="empty memory bank"):
        concat_bank(MemoryBank(3))
    bank = MemoryBank(3)
    frames = [frame(rng) for _ in range(3)]
    for t, f in enumerate(frames):
        bank.push(f, t)
    Q, E, M = concat_bank(bank)
    assert Q.shape == (12, 3) and E.shape == (12, 6) and M.shape == (12, 1)
    for i, f in enumerate(frames):
        sl = slice(4 * i, 4 * i + 4)
        assert np.array_equal(Q[sl], f.Q) and np.array_equal(E[sl], f.E)
        assert np.array_equal(M[sl], f.M)
    single = MemoryBank(3).push(frames[0], 0)
    assert np.array_equal(concat_bank(single)[1], frames[0].E)


def test_fuse_mask_examples(rng):
    w = init_mask_embed(6, rng)
    E = rng.normal(size=(5, 6))
    assert np.array_equal(fuse_mask(E, np.zeros(5), w), E)
    w.bias = rng.normal(size=6)
    F = fuse_mask(np.zeros((5, 6)), np.ones(5), w)
    assert np.allclose(F, (w.weight + w.bias)[None], atol=0)
    with pytest.raises(ValueError):
        fuse_mask(E, np.zeros(4), w)


def test_fuse_mask_linear_and_additive(rng):
    w = MaskEmbedWeights(rng.normal(size=6), np.zeros(6))
    E = rng.normal(size=(5, 6))
    a, b = rng.uniform(0, 0.5, 5), rng.uniform(0, 0.5, 5)
    assert np.allclose(fuse_mask(E, a + b, w), fuse_mask(E, a, w) + w(b), atol=1e-12)
    E2 = rng.normal(size=(5, 6))
    assert np.allclose(fuse_mask(E + E2, a, w), fuse_mask(E, a, w) + E2, atol=1e-12)


def test_fuse_mask_toggles(rng):
    w = MaskEmbedWeights(rng.normal(size=6), rng.normal(size=6))
    E, M = rng.normal(size=(5, 6)), rng.uniform(size=5)
    assert np.array_equal(fuse_mask(E, M, w, use_mask=False), E)
    assert np.allclose(fuse_mask(E, M, w, use_geometry=False), w(M))
    with pytest.raises(ValueError):
        fuse_mask(E, M, w, use_geometry=False, use_mask=False)


def test_state_round_trip(rng):
    bank = MemoryBank(3)
    for t in (2, 5, 9):
        bank.push(frame(rng), t)
    back = MemoryBank.from_state(3, bank.state_dict())
    assert back.timestamps == bank.timestamps
    for a, b in zip(bank.frames, back.frames):
        assert np.array_equal(a.E, b.E) and np.array_equal(a.Q, b.Q)


def test_mapped_leaves_original(rng):
    bank = MemoryBank(2).push(frame(rng), 0)
    moved = bank.mapped(lambda q: q + 1.0)
    assert np.allclose(moved.frames[0].Q, bank.frames[0].Q + 1)
    assert moved.frames[0].E is bank.frames[0].E
