"""Activation-space Fisher information per output channel.

For a layer with output activations ``a`` (pre-nonlinearity) and loss gradients
``g`` over ``N`` examples, channel ``o`` scores::

    delta_o = 1/(2N) * sum_n (sum_d a[n, o, d] * g[n, o, d]) ** 2

where ``d`` runs over the channel's spatial positions. A layer's potential is the
sum of its channel scores. Everything comes from one forward and one backward pass.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import engine
from .errors import NumericError
from .finetune import episode_batches, evaluate, fine_tune
from .plan import single_layer_plan
from .protonet import batch_loss
from .selection import top_k_channels


@dataclass
class LayerFisher:
    layer: int
    name: str
    deltas: np.ndarray
    potential: float


@dataclass
class FisherReport:
    per_layer: list
    sample_count: int
    loss_value: float

    def by_layer(self):
        return {lf.layer: lf for lf in self.per_layer}

    def to_dict(self):
        return {
            "sample_count": self.sample_count,
            "loss_value": self.loss_value,
            "per_layer": [{"layer": lf.layer, "name": lf.name, "potential": lf.potential,
                           "deltas": [float(v) for v in lf.deltas]} for lf in self.per_layer],
        }

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def channel_fisher(a, g):
    """Per-channel Fisher values from activations and gradients of shape (N, C, ...)."""
    a = np.asarray(a, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    n, c = a.shape[:2]
    inner = (a.reshape(n, c, -1) * g.reshape(n, c, -1)).sum(axis=2)
    return (inner ** 2).sum(axis=0) / (2 * n)


def fisher_from_loss(spec, params, x, loss_fn, layers=None, dump=None):
    """Fisher report for ``layers`` (default: every weight layer) of one batch.

    ``loss_fn(features) -> (loss, dloss/dfeatures)``. If ``dump`` is a dict it receives
    ``{layer: (a, g)}`` for independent checking.
    """
    if len(x) == 0:
        raise ValueError("Fisher pass needs at least one example")
    layers = spec.weight_layers if layers is None else sorted(layers)
    cache = engine.ActivationCache(fisher=layers)
    feats = engine.forward(spec, params, x, cache)
    loss, grad = loss_fn(feats)
    if not math.isfinite(loss):
        raise NumericError("non-finite loss in Fisher pass")
    grads = engine.backward(spec, params, cache, grad)
    per_layer = []
    for idx in layers:
        layer = spec.layers[idx]
        a, g = cache.outputs[idx], grads.activations[idx]
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(g))):
            raise NumericError(f"non-finite activation or gradient in layer {layer.name!r}", layer=layer.name)
        if dump is not None:
            dump[idx] = (a, g)
        deltas = channel_fisher(a, g)
        per_layer.append(LayerFisher(idx, layer.name, deltas, float(deltas.sum())))
    return FisherReport(per_layer, len(x), float(loss))


def fisher_pass(spec, params, support_x, support_y, query_x, query_y, temperature=0.1, dump=None):
    """Fisher report under the prototype loss: prototypes from ``support``, loss on ``query``.

    Support and query are stacked into one batch so prototypes receive gradients too.
    """
    x = np.concatenate([support_x, query_x], axis=0)
    n_s = len(support_x)

    def loss_fn(feats):
        return batch_loss(feats, n_s, support_y, query_y, temperature)

    return fisher_from_loss(spec, params, x, loss_fn, dump=dump)


@dataclass
class SweepResult:
    rows: list = field(default_factory=list)  # dicts: layer_index, name, ratio, gain, gain_per_param, gain_per_mac
    header: dict = field(default_factory=dict)

    def to_csv(self):
        buf = io.StringIO()
        cols = ["layer_index", "ratio", "gain", "gain_per_param", "gain_per_mac"]
        w = csv.DictWriter(buf, fieldnames=cols, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: (repr(float(r[k])) if k not in ("layer_index",) else r[k]) for k in cols})
        return buf.getvalue()

    def to_dict(self):
        return {"header": self.header, "rows": self.rows}


def single_layer_sweep(spec, params, episodes, channel_ratios, *, iters=40, lr=1e-3, momentum=0.9,
                       temperature=0.1, augment=None, seed=0, include_bias=True):
    """Fine-tune one layer at a time at each channel ratio and record the mean accuracy gain.

    Channels within a layer are the top-K by Fisher information of that episode. The gain
    is measured against the frozen backbone on the same episode.
    """
    if not episodes:
        raise ValueError("sweep needs at least one episode")
    for r in channel_ratios:
        if not 0 < r <= 1:
            raise ValueError(f"channel ratio {r} outside (0, 1]")
    augment = augment or {}
    base_acc, reports = [], []
    for e_idx, ep in enumerate(episodes):
        base_acc.append(evaluate(spec, params, ep, temperature))
        fx, fy = episode_batches(ep, seed, e_idx, "fisher", augment)
        reports.append(fisher_pass(spec, params, ep.support_x, ep.support_y, fx, fy, temperature).by_layer())
    result = SweepResult(header={"include_bias": include_bias, "iters": iters, "lr": lr,
                                 "momentum": momentum, "temperature": temperature,
                                 "episodes": len(episodes), "seed": seed})
    for idx in spec.weight_layers:
        layer = spec.layers[idx]
        for ratio in channel_ratios:
            gains = []
            for e_idx, ep in enumerate(episodes):
                chans = top_k_channels(reports[e_idx][idx].deltas, ratio)
                plan = single_layer_plan(spec, idx, chans, include_bias)
                tuned = fine_tune(spec, params, ep, plan, iters=iters, lr=lr, momentum=momentum,
                                  temperature=temperature, seed=seed, episode_index=e_idx, augment=augment)
                gains.append(evaluate(spec, tuned, ep, temperature) - base_acc[e_idx])
            gain = float(np.mean(gains))
            result.rows.append({"layer_index": idx, "name": layer.name, "ratio": float(ratio), "gain": gain,
                                "gain_per_param": gain / layer.param_count,
                                "gain_per_mac": gain / layer.mac_count})
    return result
