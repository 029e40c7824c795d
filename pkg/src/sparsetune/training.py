"""Episodic meta-training and per-episode sparse adaptation."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import engine
from .cost import Budget, fits, plan_cost
from .episodes import sample_fixed_episode
from .errors import DivergenceError
from .finetune import episode_batches, evaluate, fine_tune
from .fisher import fisher_pass
from .plan import UpdatePlan, full_plan, last_layer_plan
from .protonet import batch_loss
from .rng import stream
from .selection import score_layers, select

PLAN_SOURCES = ("tinytrain", "full", "last-layer", "random-channels", "l2norm-channels", "none", "file")


def lr_schedule(step, total_steps, warmup_steps, base_lr=1e-6, peak_lr=5e-5, final_lr=1e-6):
    """Linear warm-up from ``base_lr`` to ``peak_lr`` over ``warmup_steps``, then cosine
    annealing down to ``final_lr`` at ``total_steps``."""
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr + (peak_lr - base_lr) * step / warmup_steps
    span = max(1, total_steps - warmup_steps)
    t = min(1.0, (step - warmup_steps) / span)
    return final_lr + 0.5 * (peak_lr - final_lr) * (1 + math.cos(math.pi * t))


@dataclass
class MetaSchedule:
    epochs: int = 100
    episodes_per_epoch: int = 2000
    warmup_epochs: int = 5
    base_lr: float = 1e-6
    peak_lr: float = 5e-5
    final_lr: float = 1e-6
    momentum: float = 0.9
    way: int = 5
    shot: int = 5
    query: int = 5
    temperature: float = 0.1

    @property
    def total_steps(self):
        return self.epochs * self.episodes_per_epoch

    @property
    def warmup_steps(self):
        return min(self.warmup_epochs, self.epochs) * self.episodes_per_epoch

    def lr_at(self, epoch, step_in_epoch=0):
        return lr_schedule(epoch * self.episodes_per_epoch + step_in_epoch, self.total_steps,
                           self.warmup_steps, self.base_lr, self.peak_lr, self.final_lr)


def _all_finite(params):
    return all(np.all(np.isfinite(a)) for t in params.tensors.values() for a in t.values())


def meta_train(spec, params, x, y, schedule, seed=0, callback=None):
    """Episodic ProtoNet training of every layer. Returns ``(params, loss_curve)``.

    ``loss_curve`` holds one mean loss per epoch. A non-finite loss or weight raises
    :class:`DivergenceError` carrying the last finite parameters.
    """
    rng = stream(seed, "meta")
    trainable = spec.weight_layers
    velocity = None
    curve = []
    for epoch in range(schedule.epochs):
        losses = []
        for i in range(schedule.episodes_per_epoch):
            ep = sample_fixed_episode(x, y, rng, schedule.way, schedule.shot, schedule.query)
            cache = engine.ActivationCache(trainable=trainable)
            feats = engine.forward(spec, params, np.concatenate([ep.support_x, ep.query_x]), cache)
            loss, grad = batch_loss(feats, len(ep.support_x), ep.support_y, ep.query_y, schedule.temperature)
            step = epoch * schedule.episodes_per_epoch + i
            if not math.isfinite(loss):
                raise DivergenceError(f"non-finite meta-training loss at step {step}", params=params, step=step)
            grads = engine.backward(spec, params, cache, grad)
            updated, velocity = engine.sgd_momentum_step(spec, params, grads, schedule.lr_at(epoch, i),
                                                         schedule.momentum, velocity)
            if not _all_finite(updated):
                raise DivergenceError(f"non-finite weights after step {step}", params=params, step=step)
            params = updated
            losses.append(loss)
        curve.append(float(np.mean(losses)))
        if callback is not None:
            callback(epoch, curve[-1], params)
    return params, curve


@dataclass
class AdaptResult:
    accuracy: float
    base_accuracy: float
    cost: object
    plan: UpdatePlan
    params: object = field(repr=False)
    selection_seconds: float = 0.0
    total_seconds: float = 0.0
    infeasible: bool = False


def build_plan(spec, params, episode, plan_source, budget, *, channel_ratio=0.5, temperature=0.1,
               seed=0, episode_index=0, augment=None, plan=None, include_bias=True):
    """Plan for one episode. The Fisher-ranked sources (tinytrain and the two channel
    baselines) run one Fisher pass on the support set plus a pseudo-query draw, score
    layers, and select greedily under ``budget``."""
    if plan_source not in PLAN_SOURCES:
        raise ValueError(f"unknown plan source {plan_source!r}")
    if plan_source == "none":
        return UpdatePlan(source="none")
    if plan_source == "full":
        return full_plan(spec)
    if plan_source == "last-layer":
        return last_layer_plan(spec)
    if plan_source == "file":
        if plan is None:
            raise ValueError("plan source 'file' needs an explicit plan")
        return plan.validate(spec)
    px, py = episode_batches(episode, seed, episode_index, "fisher", augment)
    report = fisher_pass(spec, params, episode.support_x, episode.support_y, px, py, temperature)
    ranking = score_layers(spec, report)
    mode = {"tinytrain": "fisher", "random-channels": "random", "l2norm-channels": "l2norm"}[plan_source]
    return select(spec, report, ranking, budget, channel_ratio, channel_mode=mode, params=params,
                  rng=stream(seed, "selection", episode_index), include_bias=include_bias, seed=seed,
                  source=plan_source)


def adapt_episode(spec, params, episode, plan_source="tinytrain", budget=None, k=40, lr=1e-3,
                  momentum=0.9, *, channel_ratio=0.5, temperature=0.1, seed=0, episode_index=0,
                  augment=None, plan=None, include_bias=True):
    """Select a plan, fine-tune it for ``k`` steps, then evaluate on the query set.

    A plan that does not fit ``budget`` is replaced by the empty plan and flagged.
    """
    budget = budget or Budget.unbounded()
    t0 = time.perf_counter()
    base = evaluate(spec, params, episode, temperature)
    t_sel = time.perf_counter()
    plan = build_plan(spec, params, episode, plan_source, budget, channel_ratio=channel_ratio,
                      temperature=temperature, seed=seed, episode_index=episode_index, augment=augment,
                      plan=plan, include_bias=include_bias)
    sel_seconds = time.perf_counter() - t_sel
    cost = plan_cost(spec, plan)
    infeasible = False
    if not fits(cost, budget):
        infeasible = True
        plan = UpdatePlan(budget=budget.to_dict(), source=plan.source,
                          warning=f"{plan.source} plan exceeds the budget; running without updates")
        cost = plan_cost(spec, plan)
    elif plan.is_empty() and plan_source != "none":
        infeasible = True
    tuned = fine_tune(spec, params, episode, plan, iters=k, lr=lr, momentum=momentum, temperature=temperature,
                      seed=seed, episode_index=episode_index, augment=augment)
    acc = base if tuned is params else evaluate(spec, tuned, episode, temperature)
    return AdaptResult(acc, base, cost, plan, tuned, sel_seconds, time.perf_counter() - t0, infeasible)
