from itertools import product

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dtsda import labeling as Lb
from dtsda.data import WindowedDataset


def brute_force(dist, penalty):
    T, N = dist.shape
    best, arg = np.inf, None
    for path in product(range(T), repeat=N):
        c = sum(dist[p, i] for i, p in enumerate(path)) + sum(penalty[a, b] for a, b in zip(path, path[1:]))
        if c < best:
            best, arg = c, path
    return best, arg


# ---------------------------------------------------------------- cosine distance


def test_cosine_examples():
    assert Lb.cosine_distance([3.0, 4.0], [3.0, 4.0]) == pytest.approx(0.0, abs=1e-15)
    assert Lb.cosine_distance([1, 0], [0, 1]) == 1.0
    assert Lb.cosine_distance([1, 0], [-1, 0]) == 2.0
    assert Lb.cosine_distance([0, 0], [1, 0]) == 1.0


def test_cosine_dimension_mismatch():
    with pytest.raises(ValueError):
        Lb.cosine_distance([1, 0], [1, 0, 0])


def test_cosine_matrix_matches_scalar():
    rng = np.random.default_rng(0)
    f, u = rng.normal(size=(7, 4)), rng.normal(size=(3, 4))
    f[2] = 0
    m = Lb.cosine_distance_matrix(f, u)
    for t, i in product(range(3), range(7)):
        assert m[t, i] == pytest.approx(Lb.cosine_distance(f[i], u[t]), abs=1e-14)


# ---------------------------------------------------------------- centroids


def test_soft_init_uniform_is_global_mean():
    rng = np.random.default_rng(1)
    f = rng.normal(size=(9, 3))
    c = Lb.soft_init_centroids(f, np.full((9, 4), 0.25))
    np.testing.assert_allclose(c.u, np.tile(f.mean(axis=0), (4, 1)), atol=1e-14)
    assert c.origin == "soft"


def test_soft_init_one_hot_is_group_means():
    f = np.array([[1.0, 0], [3, 0], [0, 2]])
    p = np.array([[1.0, 0], [1, 0], [0, 1]])
    np.testing.assert_allclose(Lb.soft_init_centroids(f, p).u, [[2, 0], [0, 2]])


def test_soft_init_random_matches_weighted_mean():
    rng = np.random.default_rng(2)
    f = rng.normal(size=(11, 5))
    p = rng.dirichlet(np.ones(3), size=11)
    u = Lb.soft_init_centroids(f, p).u
    for t in range(3):
        ref = sum(p[i, t] * f[i] for i in range(11)) / sum(p[i, t] for i in range(11))
        np.testing.assert_allclose(u[t], ref, atol=1e-12)


def test_soft_init_zero_weight_falls_back():
    f = np.array([[1.0, 0], [3, 2]])
    p = np.array([[1.0, 0], [1, 0]])
    np.testing.assert_allclose(Lb.soft_init_centroids(f, p).u[1], [2, 1])


def test_soft_init_empty():
    with pytest.raises(ValueError):
        Lb.soft_init_centroids(np.zeros((0, 2)), np.zeros((0, 2)))


def test_hard_centroids_examples():
    f = np.array([[1.0, 0], [0, 1]])
    np.testing.assert_allclose(Lb.hard_centroids(f, [0, 0], 2).u[0], [0.5, 0.5])
    np.testing.assert_allclose(Lb.hard_centroids(f, [0, 1], 2).u, f)


def test_hard_centroids_empty_state_keeps_prior():
    f = np.array([[1.0, 0], [0, 1]])
    prior = np.array([[9.0, 9], [7, 7], [5, 5]])
    u = Lb.hard_centroids(f, [0, 0], 3, prior=prior).u
    np.testing.assert_allclose(u, [[0.5, 0.5], [7, 7], [5, 5]])


def test_hard_centroids_random_group_by():
    rng = np.random.default_rng(3)
    f = rng.normal(size=(20, 4))
    path = rng.integers(0, 3, size=20)
    u = Lb.hard_centroids(f, path, 3).u
    for t in range(3):
        np.testing.assert_allclose(u[t], np.mean([f[i] for i in range(20) if path[i] == t], axis=0), atol=1e-14)


# ---------------------------------------------------------------- matrices


def test_distance_matrix_examples():
    u = np.array([[1.0, 0], [0, 1], [-1, 0]])
    m = Lb.build_distance_matrix(np.array([[2.0, 0]]), u)
    np.testing.assert_allclose(m[:, 0], [0, 1, 2], atol=1e-15)
    dup = Lb.build_distance_matrix(np.array([[1.0, 2], [1.0, 2]]), u)
    np.testing.assert_array_equal(dup[:, 0], dup[:, 1])


def test_distance_matrix_random_recompute():
    rng = np.random.default_rng(4)
    f, u = rng.normal(size=(5, 6)), rng.normal(size=(3, 6))
    m = Lb.build_distance_matrix(f, Lb.Centroids(u, "soft"))
    assert m.shape == (3, 5)
    for t, i in product(range(3), range(5)):
        ref = 1 - f[i] @ u[t] / np.sqrt(f[i] @ f[i]) / np.sqrt(u[t] @ u[t])
        assert m[t, i] == pytest.approx(ref, abs=1e-14)


def test_distance_matrix_empty():
    with pytest.raises(ValueError):
        Lb.build_distance_matrix(np.zeros((0, 2)), np.ones((2, 2)))


def test_penalty_matrix():
    np.testing.assert_allclose(Lb.build_penalty_matrix(3, 0.5), [[0, .5, .5], [.5, 0, .5], [.5, .5, 0]])
    np.testing.assert_array_equal(Lb.build_penalty_matrix(4, 0.0), np.zeros((4, 4)))
    np.testing.assert_array_equal(Lb.build_penalty_matrix(1, 3.0), [[0.0]])
    with pytest.raises(ValueError):
        Lb.build_penalty_matrix(2, -0.1)


# ---------------------------------------------------------------- state path


def test_single_state_path():
    d = np.array([[0.3, 0.1, 0.4]])
    sp = Lb.min_cost_state_path(d, Lb.build_penalty_matrix(1, 1.0))
    assert sp.path.tolist() == [0, 0, 0]
    assert sp.total_cost == pytest.approx(0.8)
    assert sp.switch_count == 0


def test_zero_penalty_decouples():
    rng = np.random.default_rng(5)
    d = rng.integers(0, 3, size=(3, 12)).astype(float)  # plenty of ties
    sp = Lb.min_cost_state_path(d, np.zeros((3, 3)))
    np.testing.assert_array_equal(sp.path, d.argmin(axis=0))


def test_worked_example():
    d = np.array([[0.1, 0.9, 0.2], [0.8, 0.1, 0.7]])
    # brute force over all 8 paths gives these
    assert brute_force(d, Lb.build_penalty_matrix(2, 0.5)) == (pytest.approx(1.2), (0, 0, 0))
    assert brute_force(d, Lb.build_penalty_matrix(2, 0.1)) == (pytest.approx(0.6), (0, 1, 0))
    sp = Lb.min_cost_state_path(d, Lb.build_penalty_matrix(2, 0.5))
    assert sp.path.tolist() == [0, 0, 0] and sp.total_cost == pytest.approx(1.2)
    sp = Lb.min_cost_state_path(d, Lb.build_penalty_matrix(2, 0.1))
    assert sp.path.tolist() == [0, 1, 0] and sp.total_cost == pytest.approx(0.6)
    assert sp.switch_count == 2


def test_path_errors():
    with pytest.raises(ValueError):
        Lb.min_cost_state_path(np.zeros((2, 0)), np.zeros((2, 2)))
    with pytest.raises(ValueError):
        Lb.min_cost_state_path(np.array([[np.inf, 0.0]]), np.zeros((1, 1)))


@settings(max_examples=200, deadline=None)
@given(
    st.integers(1, 4), st.integers(1, 6), st.sampled_from([0.0, 0.1, 0.5, 2.0]), st.integers(0, 2**32 - 1)
)
def test_dp_matches_enumeration(T, N, gamma, seed):
    d = np.random.default_rng(seed).uniform(size=(T, N))
    P = Lb.build_penalty_matrix(T, gamma)
    best, _ = brute_force(d, P)
    sp = Lb.min_cost_state_path(d, P)
    assert sp.total_cost == pytest.approx(best, abs=1e-12)
    assert Lb.path_cost(d, P, sp.path) == pytest.approx(best, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 4), st.integers(2, 10), st.integers(0, 2**32 - 1))
def test_permutation_equivariance(T, N, seed):
    rng = np.random.default_rng(seed)
    d = rng.uniform(size=(T, N))
    P = Lb.build_penalty_matrix(T, rng.uniform(0, 1))
    perm = rng.permutation(T)
    a = Lb.min_cost_state_path(d, P).path
    # new state perm[t] carries old state t's row
    d2 = np.empty_like(d)
    d2[perm] = d
    b = Lb.min_cost_state_path(d2, P).path
    np.testing.assert_array_equal(b, perm[a])


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 4), st.integers(1, 12), st.integers(0, 2**32 - 1))
def test_saturation_gives_constant_path(T, N, seed):
    d = np.random.default_rng(seed).uniform(size=(T, N))
    sp = Lb.min_cost_state_path(d, Lb.build_penalty_matrix(T, d.sum() + 1.0))
    assert (sp.path == d.sum(axis=1).argmin()).all()


# ---------------------------------------------------------------- assignment


def test_assign_examples():
    u = np.array([[1.0, 0], [0, 1], [-1, -1]])
    assert Lb.assign_pseudo_temporal_states(np.array([[-2.0, -2]]), u).tolist() == [2]
    assert Lb.assign_pseudo_temporal_states(np.array([[1.0, 1]]), u).tolist() == [0]


def test_assign_random_is_nearest():
    rng = np.random.default_rng(6)
    f, u = rng.normal(size=(30, 4)), rng.normal(size=(3, 4))
    ts = Lb.assign_pseudo_temporal_states(f, u)
    for i in range(30):
        dists = [Lb.cosine_distance(f[i], u[t]) for t in range(3)]
        assert ts[i] == int(np.argmin(dists))
        assert dists[ts[i]] <= min(dists)


# ---------------------------------------------------------------- relabel_dataset


def _seq_dataset(features, classes, segments, domains=None):
    n = len(features)
    tidx = np.zeros(n, int)
    for s in np.unique(segments):
        tidx[segments == s] = np.arange((segments == s).sum())
    ds = WindowedDataset(np.zeros((n, 1, 4)), classes, np.zeros(n, int) if domains is None else domains, segments, tidx, 2)
    return ds


def test_relabel_identical_features_constant():
    n = 12
    ds = _seq_dataset(np.ones((n, 3)), np.zeros(n, int), np.zeros(n, int))
    feats = np.ones((n, 3))
    rng = np.random.default_rng(0)
    probs = rng.dirichlet(np.ones(3), size=n)
    Lb.relabel_dataset(ds, lambda i: feats[i], lambda i: probs[i], 3, 0.2)
    assert len(set(ds.ts.tolist())) == 1


def test_relabel_runs_each_segment_independently(monkeypatch):
    n = 10
    seg = np.r_[np.zeros(5, int), np.ones(5, int)]
    ds = _seq_dataset(np.zeros((n, 2)), np.zeros(n, int), seg)
    calls = []
    real = Lb.label_sequence

    def spy(f, p, T, g):
        calls.append(len(f))
        return real(f, p, T, g)

    monkeypatch.setattr(Lb, "label_sequence", spy)
    rng = np.random.default_rng(1)
    feats = rng.normal(size=(n, 2))
    Lb.relabel_dataset(ds, lambda i: feats[i], lambda i: np.full((len(i), 2), 0.5), 2, 0.2)
    assert calls == [5, 5]


def test_relabel_splits_recurring_class_runs(monkeypatch):
    # class 0, then class 1, then class 0 again in the same segment
    cls = np.r_[np.zeros(4, int), np.ones(3, int), np.zeros(4, int)]
    ds = _seq_dataset(np.zeros((11, 2)), cls, np.zeros(11, int))
    calls = []
    real = Lb.label_sequence
    monkeypatch.setattr(Lb, "label_sequence", lambda f, p, T, g: (calls.append(len(f)), real(f, p, T, g))[1])
    feats = np.random.default_rng(2).normal(size=(11, 2))
    Lb.relabel_dataset(ds, lambda i: feats[i], lambda i: np.full((len(i), 2), 0.5), 2, 0.2)
    assert sorted(calls) == [3, 4, 4]


def test_relabel_recovers_well_separated_states():
    # three states, left to right, dwell 8; features are noisy copies of distinct directions
    rng = np.random.default_rng(3)
    truth = np.repeat([0, 1, 2], 8)
    protos = np.eye(3) * 3 + 0.5
    feats = protos[truth] + 0.1 * rng.normal(size=(24, 3))
    ds = _seq_dataset(feats, np.zeros(24, int), np.zeros(24, int))
    # probabilities leaning to the right state with some noise, as a half-trained classifier would
    logits = -((feats[:, None, :] - protos[None]) ** 2).sum(-1) * 0.2 + rng.normal(size=(24, 3))
    probs = np.exp(logits) / np.exp(logits).sum(1, keepdims=True)
    Lb.relabel_dataset(ds, lambda i: feats[i], lambda i: probs[i], 3, 0.2)
    assert Lb.best_permutation_agreement(ds.ts, truth, 3) >= 0.95


def test_best_permutation_agreement():
    assert Lb.best_permutation_agreement([1, 1, 0, 0], [0, 0, 1, 1], 2) == 1.0
    assert Lb.best_permutation_agreement([0, 0, 0, 0], [0, 0, 1, 1], 2) == 0.5
