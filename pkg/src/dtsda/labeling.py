"""Pseudo temporal-state labelling.

Per group of temporally ordered windows: soft centroids from classifier
probabilities, a cosine distance matrix, a minimum-cost state path with a
uniform switch penalty, hard centroids from that path, and a final
nearest-centroid assignment.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .data import WindowedDataset, group_indices

log = logging.getLogger(__name__)

NORM_FLOOR = 1e-12


@dataclass
class StatePath:
    path: np.ndarray
    total_cost: float
    switch_count: int


@dataclass
class Centroids:
    u: np.ndarray  # [T, dim]
    origin: str  # "soft" or "hard"


def cosine_distance(a, b) -> float:
    """``1 - cos(a, b)``; 1 when either vector is (numerically) zero."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < NORM_FLOOR or nb < NORM_FLOOR:
        return 1.0
    return float(np.clip(1.0 - a @ b / (na * nb), 0.0, 2.0))


def cosine_distance_matrix(features: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """``[T, N]`` matrix of cosine distances, vectorised :func:`cosine_distance`."""
    nf = np.linalg.norm(features, axis=1)
    nc = np.linalg.norm(centroids, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        cos = (centroids @ features.T) / np.outer(nc, nf)
    d = np.clip(1.0 - cos, 0.0, 2.0)
    d[:, nf < NORM_FLOOR] = 1.0
    d[nc < NORM_FLOOR, :] = 1.0
    return d


def soft_init_centroids(features, probs) -> Centroids:
    """Probability-weighted feature means, one per state.

    A state whose total weight is below 1e-12 falls back to the global mean.
    """
    f = np.asarray(features, dtype=float)
    p = np.asarray(probs, dtype=float)
    if f.ndim != 2 or len(f) == 0:
        raise ValueError("need at least one feature vector")
    if p.shape[0] != f.shape[0]:
        raise ValueError("one probability row per feature required")
    w = p.sum(axis=0)
    u = p.T @ f
    ok = w >= NORM_FLOOR
    u[ok] /= w[ok, None]
    u[~ok] = f.mean(axis=0)
    return Centroids(u, "soft")


def build_distance_matrix(features, centroids: Centroids | np.ndarray) -> np.ndarray:
    f = np.asarray(features, dtype=float)
    u = centroids.u if isinstance(centroids, Centroids) else np.asarray(centroids, dtype=float)
    if f.ndim != 2 or len(f) == 0:
        raise ValueError("empty feature sequence")
    if f.shape[1] != u.shape[1]:
        raise ValueError("feature and centroid dimensions differ")
    return cosine_distance_matrix(f, u)


def build_penalty_matrix(num_states: int, gamma: float) -> np.ndarray:
    """Zero diagonal, ``gamma`` off the diagonal."""
    if num_states < 1:
        raise ValueError("need at least one state")
    if gamma < 0:
        raise ValueError("switch penalty must be non-negative")
    return gamma * (1.0 - np.eye(num_states))


def path_cost(dist: np.ndarray, penalty: np.ndarray, path) -> float:
    path = np.asarray(path)
    return float(dist[path, np.arange(len(path))].sum() + penalty[path[:-1], path[1:]].sum())


def min_cost_state_path(dist, penalty) -> StatePath:
    """Cheapest state sequence through a ``[T, N]`` distance matrix.

    A backward pass fills ``future[t, i]``, the cheapest cost of windows
    ``i+1 .. N-1`` given state ``t`` at window ``i``; a forward pass then picks
    states greedily against it. ``argmin`` breaks ties toward the lower state.
    """
    dist = np.asarray(dist, dtype=float)
    penalty = np.asarray(penalty, dtype=float)
    if dist.ndim != 2 or dist.shape[1] == 0:
        raise ValueError("distance matrix must be [T, N] with N >= 1")
    T, N = dist.shape
    if penalty.shape != (T, T):
        raise ValueError("penalty matrix must be [T, T]")
    if not (np.isfinite(dist).all() and np.isfinite(penalty).all()):
        raise ValueError("non-finite distance or penalty")

    future = np.zeros((T, N))
    for i in range(N - 2, -1, -1):
        j = i + 1
        # step[state, nxt] = penalty of moving state -> nxt plus everything from j on
        step = penalty + (future[:, j] + dist[:, j])[None, :]
        future[:, i] = step.min(axis=1)

    path = np.zeros(N, dtype=np.int64)
    path[0] = np.argmin(future[:, 0] + dist[:, 0])
    for i in range(N - 1):
        j = i + 1
        path[j] = np.argmin(future[:, j] + dist[:, j] + penalty[path[i], :])
    return StatePath(path, path_cost(dist, penalty, path), int(np.count_nonzero(np.diff(path))))


def hard_centroids(features, path, num_states: int, prior: Centroids | np.ndarray | None = None) -> Centroids:
    """Mean feature per state along ``path``; empty states keep ``prior``."""
    f = np.asarray(features, dtype=float)
    path = np.asarray(path)
    if path.shape != (len(f),):
        raise ValueError("path length must equal the number of features")
    if prior is None:
        u = np.zeros((num_states, f.shape[1]))
    else:
        u = (prior.u if isinstance(prior, Centroids) else np.asarray(prior, dtype=float)).copy()
    counts = np.bincount(path, minlength=num_states)
    sums = np.zeros_like(u)
    np.add.at(sums, path, f)
    used = counts > 0
    u[used] = sums[used] / counts[used, None]
    return Centroids(u, "hard")


def assign_pseudo_temporal_states(features, centroids: Centroids | np.ndarray) -> np.ndarray:
    """Nearest centroid by cosine distance, ties to the lower state index."""
    return build_distance_matrix(features, centroids).argmin(axis=0)


def label_sequence(features, probs, num_states: int, gamma: float) -> np.ndarray:
    """One full refinement pass on a single temporally ordered group."""
    soft = soft_init_centroids(features, probs)
    dist = build_distance_matrix(features, soft)
    sp = min_cost_state_path(dist, build_penalty_matrix(num_states, gamma))
    hard = hard_centroids(features, sp.path, num_states, prior=soft)
    return assign_pseudo_temporal_states(features, hard)


def contiguous_runs(temporal_index: np.ndarray) -> list[np.ndarray]:
    """Split sorted positions wherever the temporal index jumps by more than one."""
    cuts = np.flatnonzero(np.diff(temporal_index) != 1) + 1
    return np.split(np.arange(len(temporal_index)), cuts)


def relabel_dataset(
    ds: WindowedDataset,
    feature_fn: Callable[[np.ndarray], np.ndarray],
    probs_fn: Callable[[np.ndarray], np.ndarray],
    num_states: int,
    gamma: float,
) -> float:
    """Refresh ``ds.ts`` in place, one independent pass per (domain, class, segment) run.

    ``feature_fn`` and ``probs_fn`` map an index array of windows to their
    bottleneck features and temporal-state probabilities. A class that
    recurs within one segment after another activity forms separate runs.
    Returns the fraction of windows whose state changed.
    """
    if len(ds) == 0:
        log.warning("relabel_dataset: empty dataset, nothing to do")
        return 0.0
    feats = np.asarray(feature_fn(np.arange(len(ds))), dtype=float)
    probs = np.asarray(probs_fn(np.arange(len(ds))), dtype=float)
    if probs.shape != (len(ds), num_states):
        raise ValueError(f"probs_fn returned {probs.shape}, expected {(len(ds), num_states)}")
    new_ts = ds.ts.copy()
    for key, idx in group_indices(ds).items():
        if len(idx) == 0:
            log.warning("relabel_dataset: group %s has no windows", key)
            continue
        for run in contiguous_runs(ds.temporal_index[idx]):
            sel = idx[run]
            new_ts[sel] = label_sequence(feats[sel], probs[sel], num_states, gamma)
    changed = float(np.mean(new_ts != ds.ts))
    ds.ts[:] = new_ts  # single writer commit
    return changed


def best_permutation_agreement(pred, truth, num_states: int) -> float:
    """Fraction of matches after the best one-to-one relabelling of ``pred``.

    Solved as an assignment problem on the contingency table.
    """
    from scipy.optimize import linear_sum_assignment

    pred, truth = np.asarray(pred), np.asarray(truth)
    k = max(num_states, int(truth.max()) + 1, int(pred.max()) + 1)
    table = np.zeros((k, k))
    np.add.at(table, (pred, truth), 1)
    r, c = linear_sum_assignment(-table)
    return float(table[r, c].sum() / len(pred))


def random_state_probs(features: np.ndarray, num_states: int, seed: int) -> np.ndarray:
    """Softmax of a seeded random linear map, standing in for an untrained state classifier."""
    rng = np.random.default_rng(seed)
    f = np.asarray(features, dtype=float)
    w = rng.normal(size=(f.shape[1], num_states)) / np.sqrt(max(f.shape[1], 1))
    z = f @ w
    z -= z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def label_feature_table(segments, order, features, num_states: int, gamma: float, seed: int = 0) -> np.ndarray:
    """States for rows of a ``(segment, order, features)`` table, in input row order.

    Each segment is sorted by ``order`` and labelled as one sequence; the
    soft initial centroids come from :func:`random_state_probs`.
    """
    segments = np.asarray(segments)
    order = np.asarray(order)
    features = np.asarray(features, dtype=float)
    if features.ndim != 2 or len(features) != len(segments) or len(order) != len(segments):
        raise ValueError("segments, order and features must have one row each")
    probs = random_state_probs(features, num_states, seed)
    out = np.zeros(len(segments), dtype=np.int64)
    for seg in np.unique(segments):
        idx = np.flatnonzero(segments == seg)
        idx = idx[np.argsort(order[idx], kind="stable")]
        if len(np.unique(order[idx])) != len(idx):
            raise ValueError(f"duplicate order values in segment {seg}")
        out[idx] = label_sequence(features[idx], probs[idx], num_states, gamma)
    return out
