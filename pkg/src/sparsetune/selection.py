"""Layer scoring and budget-constrained layer/channel selection.

Layers are ranked by Fisher potential per normalised parameter count and per
normalised MAC count, then walked greedily in rank order: a layer's entry is kept
if the plan still fits the budget, skipped otherwise (no backtracking).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .cost import fits, plan_cost
from .plan import PlanEntry, UpdatePlan

CHANNEL_MODES = ("fisher", "random", "l2norm")


@dataclass(frozen=True)
class LayerScore:
    layer: int
    name: str
    potential: float
    norm_params: float
    norm_macs: float
    score: float


@dataclass
class Ranking:
    """Layer scores in rank order. ``all_zero`` flags a degenerate Fisher report."""

    scores: list
    all_zero: bool = False

    def __iter__(self):
        return iter(self.scores)

    def __len__(self):
        return len(self.scores)

    def order(self):
        return [s.layer for s in self.scores]

    def to_list(self):
        return [asdict(s) for s in self.scores]


def layer_scores(potentials, param_counts, mac_counts):
    """Scores and rank order for parallel arrays of potentials, parameter and MAC counts.

    Returns ``(norm_params, norm_macs, scores, order)`` where ``order`` lists positions
    by descending score, ties to the later position.
    """
    potentials = [float(p) for p in potentials]
    max_p, max_m = max(param_counts), max(mac_counts)
    if max_p <= 0 or max_m <= 0:
        raise ValueError("scored layers need positive parameter and MAC counts")
    norm_p = [p / max_p for p in param_counts]
    norm_m = [m / max_m for m in mac_counts]
    scores = [pot / (a * b) for pot, a, b in zip(potentials, norm_p, norm_m)]
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], -i))
    return norm_p, norm_m, scores, order


def score_layers(spec, fisher):
    """Score every layer in ``fisher``; descending score, ties to the deeper layer."""
    per_layer = sorted(fisher.per_layer, key=lambda lf: lf.layer)
    if not per_layer:
        return Ranking([], True)
    layers = [spec.layers[lf.layer] for lf in per_layer]
    norm_p, norm_m, scores, order = layer_scores([lf.potential for lf in per_layer],
                                                 [layer.param_count for layer in layers],
                                                 [layer.mac_count for layer in layers])
    ranked = [LayerScore(per_layer[i].layer, layers[i].name, per_layer[i].potential, norm_p[i], norm_m[i],
                         scores[i]) for i in order]
    return Ranking(ranked, all(s.potential == 0 for s in ranked))


def channel_count(ratio, n_channels):
    if not 0 < ratio <= 1:
        raise ValueError(f"channel ratio {ratio} outside (0, 1]")
    # round away float noise such as 0.1 * 30 = 3.0000000000000004
    return max(1, min(n_channels, math.ceil(round(ratio * n_channels, 9))))


def top_k_channels(values, ratio):
    """Indices of the ``ceil(ratio * C)`` largest values, ties to the lower index; sorted."""
    values = np.asarray(values)
    k = channel_count(ratio, len(values))
    order = sorted(range(len(values)), key=lambda o: (-values[o], o))
    return sorted(order[:k])


def static_channel_baselines(weight, ratio, mode, rng=None):
    """Static channel choice for one layer: ``random`` (uniform without replacement from
    ``rng``) or ``l2norm`` (largest output-channel weight norms)."""
    weight = np.asarray(weight)
    n = weight.shape[0]
    k = channel_count(ratio, n)
    if mode == "random":
        if rng is None:
            raise ValueError("random channel selection needs a generator")
        return sorted(int(c) for c in rng.choice(n, size=k, replace=False))
    if mode == "l2norm":
        norms = np.sqrt((weight.reshape(n, -1).astype(np.float64) ** 2).sum(axis=1))
        return top_k_channels(norms, ratio)
    raise ValueError(f"unknown static channel mode {mode!r}")


def select(spec, fisher, ranking, budget, channel_ratio=0.5, *, channel_mode="fisher", params=None,
           rng=None, include_bias=True, batch=1, dtype="float32", seed=None, source="tinytrain"):
    """Greedy budget-constrained plan.

    Candidate entries are built in rank order with ``ceil(ratio * C)`` channels picked
    by ``channel_mode``; each is kept iff the cumulative plan still fits ``budget``.
    """
    if channel_mode not in CHANNEL_MODES:
        raise ValueError(f"unknown channel mode {channel_mode!r}")
    if channel_mode == "l2norm" and params is None:
        raise ValueError("l2norm channel selection needs the parameters")
    deltas = {lf.layer: lf.deltas for lf in fisher.per_layer}
    plan = UpdatePlan(budget=budget.to_dict(), channel_ratio=channel_ratio, seed=seed,
                      scores=ranking.to_list(), source=source)
    skipped = []
    for s in ranking:
        layer = spec.layers[s.layer]
        if channel_mode == "fisher":
            chans = top_k_channels(deltas[s.layer], channel_ratio)
        else:
            w = params[layer.name]["weight"] if params is not None else np.zeros(layer.weight_shape)
            chans = static_channel_baselines(w, channel_ratio, channel_mode, rng)
        candidate = plan.with_entry(PlanEntry(s.layer, tuple(chans), include_bias))
        if fits(plan_cost(spec, candidate, batch, dtype), budget):
            plan = candidate
        else:
            skipped.append(s.layer)
    plan.skipped = skipped
    if plan.is_empty():
        plan.warning = "budget admits no layer; plan is empty"
    elif ranking.all_zero:
        plan.warning = "all Fisher potentials are zero; ranking is by tie rule only"
    return plan
