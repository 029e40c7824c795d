"""Various-way, various-shot episode sampling and pseudo-query augmentation."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import SamplingError

MIN_WAY = 5
MAX_WAY = 50
MAX_SUPPORT = 500
MAX_SUPPORT_PER_CLASS = 100  # bounds each class's share of the support size, not its shots
MAX_QUERY_PER_CLASS = 10


@dataclass
class Episode:
    support_x: np.ndarray
    support_y: np.ndarray  # episode-local labels 0..way-1
    query_x: np.ndarray
    query_y: np.ndarray
    classes: np.ndarray  # dataset class id of each local label
    shots: np.ndarray  # support examples per local class

    @property
    def way(self):
        return len(self.classes)

    def stats(self):
        return {"way": int(self.way), "support": int(len(self.support_y)), "query": int(len(self.query_y)),
                "shots": [int(s) for s in self.shots], "classes": [int(c) for c in self.classes]}


@dataclass
class EpisodeIndices:
    classes: np.ndarray
    support: list  # per class: dataset indices
    query: list


def sample_episode_indices(labels, rng, max_way=MAX_WAY, max_support=MAX_SUPPORT,
                           max_support_per_class=MAX_SUPPORT_PER_CLASS, max_query=MAX_QUERY_PER_CLASS):
    """Draw one imbalanced episode over ``labels``.

    Way is uniform on [5, min(max_way, n_classes)]; the class-balanced query size is
    ``min(max_query, floor(n_c / 2))`` over the drawn classes; the support total is
    ``min(max_support, sum_c ceil(beta * min(max_support_per_class, n_c - query)))`` with
    ``beta ~ U(0, 1]``; shots are split by log-uniform class weights, each class
    getting at least one example.
    """
    labels = np.asarray(labels)
    class_ids, counts = np.unique(labels, return_counts=True)
    if len(class_ids) < MIN_WAY:
        raise SamplingError(f"need at least {MIN_WAY} classes, dataset has {len(class_ids)}")
    top = min(max_way, len(class_ids))
    way = int(rng.integers(MIN_WAY, top + 1))
    pick = np.sort(rng.choice(len(class_ids), size=way, replace=False))
    classes, n_c = class_ids[pick], counts[pick]

    n_query = int(min(max_query, np.min(n_c) // 2))
    remaining = n_c - n_query
    if np.any(remaining < 1):
        raise SamplingError("a drawn class has no examples left for the support set")
    beta = 1.0 - rng.random()  # (0, 1]
    budget = int(min(max_support, sum(math.ceil(beta * min(max_support_per_class, r)) for r in remaining)))
    budget = max(budget, way)
    weights = np.exp(rng.uniform(np.log(0.5), np.log(2.0), size=way)) * remaining
    shots = np.minimum(np.floor(weights / weights.sum() * (budget - way)).astype(int) + 1, remaining)

    support, query = [], []
    for c, s in zip(classes, shots):
        members = rng.permutation(np.flatnonzero(labels == c))
        query.append(members[:n_query])
        support.append(members[n_query:n_query + s])
    return EpisodeIndices(classes, support, query)


def sample_episode(x, labels, rng, **caps):
    idx = sample_episode_indices(labels, rng, **caps)
    return episode_from_indices(x, idx)


def episode_from_indices(x, idx):
    sup = np.concatenate(idx.support)
    qry = np.concatenate(idx.query) if idx.query else np.empty(0, dtype=int)
    sy = np.concatenate([np.full(len(s), k) for k, s in enumerate(idx.support)])
    qy = np.concatenate([np.full(len(q), k) for k, q in enumerate(idx.query)])
    shots = np.array([len(s) for s in idx.support])
    return Episode(x[sup], sy, x[qry], qy, np.asarray(idx.classes), shots)


def sample_fixed_episode(x, labels, rng, way=5, shot=5, query=5):
    """Standard N-way K-shot episode, used for desk-scale meta-training."""
    class_ids = np.unique(labels)
    if len(class_ids) < way:
        raise SamplingError(f"need {way} classes, dataset has {len(class_ids)}")
    classes = np.sort(rng.choice(class_ids, size=way, replace=False))
    support, qry = [], []
    for c in classes:
        members = rng.permutation(np.flatnonzero(labels == c))
        if len(members) < shot + query:
            raise SamplingError(f"class {c} has {len(members)} examples, need {shot + query}")
        support.append(members[:shot])
        qry.append(members[shot:shot + query])
    return episode_from_indices(x, EpisodeIndices(classes, support, qry))


def make_pseudo_query(support_x, support_y, rng, flip_prob=0.5, crop_pad=2):
    """One augmented copy per support image: random horizontal flip, then a random
    crop of the reflect-padded image. Returns ``(support_x, pseudo_x, pseudo_y)``."""
    support_x = np.asarray(support_x)
    out = support_x.copy()
    n, _, h, w = support_x.shape
    if flip_prob > 0:
        flips = rng.random(n) < flip_prob
        out[flips] = out[flips, :, :, ::-1]
    if crop_pad > 0:
        p = crop_pad
        padded = np.pad(out, ((0, 0), (0, 0), (p, p), (p, p)), mode="reflect")
        offs = rng.integers(0, 2 * p + 1, size=(n, 2))
        for i, (dy, dx) in enumerate(offs):
            out[i] = padded[i, :, dy:dy + h, dx:dx + w]
    return support_x, out, np.asarray(support_y).copy()
