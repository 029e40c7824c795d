"""Sparse fine-tuning on an episode's support set and query-set evaluation."""

from __future__ import annotations

import math

import numpy as np

from . import engine
from .episodes import make_pseudo_query
from .errors import NumericError
from .protonet import batch_loss, compute_prototypes, predict
from .rng import stream

DEFAULT_AUGMENT = {"flip_prob": 0.5, "crop_pad": 2}


def _augment_kwargs(augment):
    out = dict(DEFAULT_AUGMENT)
    out.update(augment or {})
    return out


def episode_batches(episode, seed, episode_index, stream_name="fisher", augment=None):
    """Pseudo-query images and labels drawn from a named stream of one episode."""
    rng = stream(seed, stream_name, episode_index)
    _, px, py = make_pseudo_query(episode.support_x, episode.support_y, rng, **_augment_kwargs(augment))
    return px, py


def fine_tune(spec, params, episode, plan, *, iters=40, lr=1e-3, momentum=0.9, temperature=0.1,
              seed=0, episode_index=0, augment=None, callback=None):
    """Run ``iters`` SGD-momentum steps on the plan's layers/channels.

    Each step draws a fresh pseudo-query set from the support images; prototypes come
    from the support set and the loss is the prototype cross-entropy of the pseudo
    queries. Parameters outside the plan are returned untouched (same arrays).
    """
    if plan.is_empty() or iters == 0:
        return params
    plan.validate(spec)
    rng = stream(seed, "augment", episode_index)
    aug = _augment_kwargs(augment)
    trainable = plan.layers
    channels = plan.channel_map(spec)
    velocity = None
    sx, sy = episode.support_x, episode.support_y
    n_s = len(sx)
    for step in range(iters):
        _, px, py = make_pseudo_query(sx, sy, rng, **aug)
        cache = engine.ActivationCache(trainable=trainable)
        feats = engine.forward(spec, params, np.concatenate([sx, px], axis=0), cache)
        loss, grad = batch_loss(feats, n_s, sy, py, temperature)
        if not math.isfinite(loss):
            raise NumericError(f"non-finite fine-tuning loss at step {step}")
        grads = engine.backward(spec, params, cache, grad, channels)
        params, velocity = engine.sgd_momentum_step(spec, params, grads, lr, momentum, velocity, plan)
        if callback is not None:
            callback(step, loss, params)
    return params


def embed(spec, params, x, batch_size=512):
    if len(x) == 0:
        return np.empty((0, spec.feature_dim))
    return np.concatenate([engine.forward(spec, params, x[i:i + batch_size])
                           for i in range(0, len(x), batch_size)], axis=0)


def evaluate(spec, params, episode, temperature=0.1):
    """Query accuracy with prototypes recomputed from the current backbone."""
    if len(episode.query_y) == 0:
        return float("nan")
    n_s = len(episode.support_x)
    feats = embed(spec, params, np.concatenate([episode.support_x, episode.query_x], axis=0))
    protos = compute_prototypes(feats[:n_s], episode.support_y)
    pred = predict(feats[n_s:], protos, temperature)
    return float(np.mean(pred == episode.query_y))
