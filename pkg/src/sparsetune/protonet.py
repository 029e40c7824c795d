"""Nearest-prototype classification with cosine distance."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError

EPS = 1e-12


@dataclass
class Prototypes:
    classes: np.ndarray  # class ids, ascending
    centroids: np.ndarray  # (n_classes, m)

    def __len__(self):
        return len(self.classes)


def compute_prototypes(features, labels, classes=None):
    """Per-class mean of ``features``; ``classes`` fixes the order (default: sorted unique)."""
    features = np.asarray(features)
    labels = np.asarray(labels)
    classes = np.unique(labels) if classes is None else np.asarray(classes)
    centroids = np.empty((len(classes), features.shape[1]), dtype=np.result_type(features, np.float64))
    for k, c in enumerate(classes):
        members = features[labels == c]
        if len(members) == 0:
            raise ValueError(f"class {c} has no support examples")
        centroids[k] = members.mean(axis=0)
    return Prototypes(classes, centroids)


def _norms(x, what):
    n = np.linalg.norm(x, axis=1)
    if np.any(n < EPS):
        raise NumericError(f"zero-norm {what} vector; cosine distance is undefined")
    return n


def cosine_distance(u, v):
    """Pairwise ``1 - cos(u_i, v_j)``."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = _norms(u, "feature"), _norms(v, "prototype")
    return 1.0 - (u @ v.T) / np.outer(nu, nv)


def _softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def classify(features, protos, temperature=0.1):
    """Class probabilities ``softmax(-d(f(x), c_k) / temperature)``; rows follow ``protos.classes``."""
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    return _softmax(-cosine_distance(features, protos.centroids) / temperature)


def predict(features, protos, temperature=0.1):
    return protos.classes[np.argmax(classify(features, protos, temperature), axis=1)]


def protonet_loss(support_feats, support_labels, query_feats, query_labels, temperature=0.1):
    """Mean cross-entropy of the query set against support prototypes.

    Returns ``(loss, d_support, d_query)``; gradients flow through the prototypes
    back into the support features.
    """
    s = np.asarray(support_feats, dtype=np.float64)
    q = np.asarray(query_feats, dtype=np.float64)
    classes = np.unique(support_labels)
    protos = compute_prototypes(s, support_labels, classes)
    c = protos.centroids
    target = np.searchsorted(classes, query_labels)
    if np.any(classes[np.minimum(target, len(classes) - 1)] != query_labels):
        raise ValueError("query labels must appear in the support set")

    nq, nc = _norms(q, "feature"), _norms(c, "prototype")
    qh, ch = q / nq[:, None], c / nc[:, None]
    cos = qh @ ch.T
    p = _softmax((cos - 1.0) / temperature)
    n = len(q)
    loss = -np.mean(np.log(p[np.arange(n), target] + 1e-300))

    d_logits = p.copy()
    d_logits[np.arange(n), target] -= 1.0
    d_cos = d_logits / (n * temperature)
    # d cos(a, b) / d a = (b_hat - cos * a_hat) / |a|
    d_q = (d_cos @ ch - (d_cos * cos).sum(axis=1)[:, None] * qh) / nq[:, None]
    d_c = (d_cos.T @ qh - (d_cos * cos).sum(axis=0)[:, None] * ch) / nc[:, None]

    d_s = np.zeros_like(s)
    for k, cls in enumerate(classes):
        members = np.asarray(support_labels) == cls
        d_s[members] = d_c[k] / members.sum()
    return float(loss), d_s, d_q


def batch_loss(features, n_support, support_labels, query_labels, temperature=0.1):
    """Loss over a stacked ``[support; query]`` feature batch, with the gradient in the same layout."""
    loss, ds, dq = protonet_loss(features[:n_support], support_labels, features[n_support:],
                                 query_labels, temperature)
    return loss, np.concatenate([ds, dq], axis=0)
