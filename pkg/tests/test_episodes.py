import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sparsetune.episodes import (MAX_QUERY_PER_CLASS, MAX_SUPPORT, make_pseudo_query, sample_episode,
                                 sample_episode_indices, sample_fixed_episode)
from sparsetune.errors import SamplingError
from sparsetune.rng import stream


def labels_for(counts):
    return np.concatenate([np.full(n, c) for c, n in enumerate(counts)])


def test_five_class_dataset_always_gives_way_five():
    y = labels_for([30] * 5)
    for i in range(50):
        assert len(sample_episode_indices(y, stream(0, "sampler", i)).classes) == 5


def test_too_few_classes():
    with pytest.raises(SamplingError):
        sample_episode_indices(labels_for([10] * 4), np.random.default_rng(0))


def test_single_example_class_goes_to_support():
    y = labels_for([1, 20, 20, 20, 20])
    for i in range(20):
        idx = sample_episode_indices(y, stream(1, "sampler", i))
        k = list(idx.classes).index(0)
        assert len(idx.support[k]) == 1
        assert all(len(q) == 0 for q in idx.query)


@given(st.integers(0, 2 ** 32 - 1))
def test_caps_and_disjointness(seed):
    rng = np.random.default_rng(seed)
    counts = rng.integers(2, 300, size=int(rng.integers(5, 70)))
    y = labels_for(counts)
    idx = sample_episode_indices(y, stream(seed, "sampler"))
    way = len(idx.classes)
    assert 5 <= way <= min(50, len(counts))
    total = sum(len(s) for s in idx.support)
    assert way <= total <= max(MAX_SUPPORT, way)
    nq = {len(q) for q in idx.query}
    assert len(nq) == 1 and nq.pop() <= MAX_QUERY_PER_CLASS
    for c, s, q in zip(idx.classes, idx.support, idx.query):
        assert 1 <= len(s) <= counts[c] - len(q)
        assert not set(s) & set(q)
        assert np.all(y[s] == c) and np.all(y[q] == c)


def test_episode_arrays_and_stats():
    x = np.arange(200, dtype=np.float32).reshape(200, 1, 1, 1)
    y = labels_for([20] * 10)
    ep = sample_episode(x, y, stream(2, "sampler", 0))
    assert ep.way == len(ep.classes)
    assert ep.support_y.max() == ep.way - 1
    assert np.array_equal(y[ep.support_x.ravel().astype(int)], ep.classes[ep.support_y])
    assert ep.stats()["support"] == len(ep.support_y)


def test_sampling_is_deterministic():
    y = labels_for([25] * 12)
    a = sample_episode_indices(y, stream(3, "sampler", 4))
    b = sample_episode_indices(y, stream(3, "sampler", 4))
    assert np.array_equal(a.classes, b.classes)
    assert all(np.array_equal(p, q) for p, q in zip(a.support, b.support))


def test_fixed_episode_shape_and_shortage():
    x = np.zeros((60, 1, 2, 2))
    y = labels_for([10] * 6)
    ep = sample_fixed_episode(x, y, np.random.default_rng(0), way=5, shot=3, query=2)
    assert ep.way == 5 and len(ep.support_y) == 15 and len(ep.query_y) == 10
    with pytest.raises(SamplingError):
        sample_fixed_episode(x, y, np.random.default_rng(0), way=5, shot=8, query=5)


def test_pseudo_query_identity_without_augmentation():
    x = np.random.default_rng(0).standard_normal((4, 3, 6, 6))
    sx, px, py = make_pseudo_query(x, np.arange(4), np.random.default_rng(1), flip_prob=0, crop_pad=0)
    assert np.array_equal(px, x) and sx is x
    assert py.tolist() == [0, 1, 2, 3]


def test_pseudo_query_flip_only():
    x = np.random.default_rng(0).standard_normal((3, 2, 5, 5))
    _, px, _ = make_pseudo_query(x, np.zeros(3), np.random.default_rng(1), flip_prob=1.0, crop_pad=0)
    assert np.array_equal(px, x[:, :, :, ::-1])


def test_pseudo_query_crop_comes_from_reflect_pad():
    x = np.random.default_rng(0).standard_normal((5, 2, 6, 6))
    _, px, _ = make_pseudo_query(x, np.zeros(5), np.random.default_rng(2), flip_prob=0, crop_pad=2)
    padded = np.pad(x, ((0, 0), (0, 0), (2, 2), (2, 2)), mode="reflect")
    for i in range(5):
        assert any(np.array_equal(px[i], padded[i, :, a:a + 6, b:b + 6]) for a in range(5) for b in range(5))


def test_pseudo_query_is_deterministic():
    x = np.random.default_rng(0).standard_normal((4, 3, 8, 8))
    a = make_pseudo_query(x, np.zeros(4), stream(0, "augment", 1))[1]
    b = make_pseudo_query(x, np.zeros(4), stream(0, "augment", 1))[1]
    assert np.array_equal(a, b)
