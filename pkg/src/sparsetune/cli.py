"""Command-line harness: ``gendata``, ``metatrain``, ``select``, ``run`` and ``analyze``.

Exit codes: 0 success, 2 configuration error, 3 artifact mismatch, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np
from scipy import stats

from .arch import build_backbone, init_params
from .checkpoint import load_checkpoint, save_checkpoint
from .config import load_config
from .cost import fits, plan_cost
from .data import generate_toy_pair, load_dataset, save_dataset
from .episodes import sample_episode
from .errors import (ArtifactMismatchError, CheckpointError, ConfigError, DivergenceError,
                     NumericError, SamplingError, StructuralError)
from .fisher import single_layer_sweep
from .plan import UpdatePlan
from .rng import stream
from .training import MetaSchedule, adapt_episode, build_plan, meta_train

EXIT_OK, EXIT_CONFIG, EXIT_ARTIFACT, EXIT_NUMERIC = 0, 2, 3, 4

# flag name -> config key
_FLAG_KEYS = {
    "seed": "seed", "jobs": "jobs", "budget_mem": "budget_mem", "budget_mac": "budget_mac",
    "ratio": "ratio", "iters": "iters", "trials": "trials", "plan_source": "plan_source",
    "plan_file": "plan_file", "checkpoint": "checkpoint", "source_data": "source_data",
    "target_data": "target_data", "out": "out_dir",
}


def _stamp(cfg):
    return {"config_hash": cfg.config_hash(), "seed": cfg.seed}


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _write_csv(path, rows, columns):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def _out(cfg, name):
    os.makedirs(cfg.out_dir, exist_ok=True)
    return os.path.join(cfg.out_dir, name)


def _spec_from_config(cfg):
    return build_backbone(cfg.family, cfg.width, cfg.input_shape(), blocks=cfg.blocks,
                          channels=cfg.channels, expansion=cfg.expansion, feature_dim=cfg.feature_dim)


def _load_data(path, what):
    if not path:
        raise ConfigError(f"{what} dataset path is empty")
    try:
        return load_dataset(path)
    except FileNotFoundError:
        raise ConfigError(f"{what} dataset {path} does not exist") from None
    except StructuralError as exc:
        raise ArtifactMismatchError(f"{what} dataset {path}: {exc}") from None


def _load_model(cfg, sample_shape=None):
    """Checkpoint weights if configured, otherwise freshly initialised ones."""
    expected = _spec_from_config(cfg)
    if cfg.checkpoint:
        if not os.path.exists(cfg.checkpoint):
            raise ConfigError(f"checkpoint {cfg.checkpoint} does not exist")
        spec, params = load_checkpoint(cfg.checkpoint)
        if spec.fingerprint() != expected.fingerprint():
            raise ArtifactMismatchError(
                f"checkpoint architecture ({spec.family} x{spec.width}, {spec.options}) differs from the "
                f"configured one ({expected.family} x{expected.width}, {expected.options})")
    else:
        spec = expected
        params = init_params(spec, stream(cfg.seed, "init"))
    if sample_shape is not None and tuple(sample_shape) != tuple(spec.input_shape):
        raise ArtifactMismatchError(f"dataset samples are {tuple(sample_shape)}, model expects {spec.input_shape}")
    return spec, params


def _file_plan(cfg, spec):
    if cfg.plan_source != "file":
        return None
    if not cfg.plan_file:
        raise ConfigError("plan_source=file needs plan_file")
    try:
        with open(cfg.plan_file, encoding="utf-8") as fh:
            plan = UpdatePlan.from_json(fh.read())
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read plan {cfg.plan_file}: {exc}") from None
    try:
        return plan.validate(spec)
    except StructuralError as exc:
        raise ArtifactMismatchError(f"plan {cfg.plan_file}: {exc}") from None


# -- gendata ---------------------------------------------------------------

def cmd_gendata(cfg):
    src, tgt = generate_toy_pair(cfg.seed, cfg.source_classes, cfg.target_classes, cfg.per_class,
                                 cfg.input_shape(), cfg.shift)
    paths = {"source": cfg.source_data or _out(cfg, "source.ttds"),
             "target": cfg.target_data or _out(cfg, "target.ttds")}
    for (name, path), ds in zip(paths.items(), (src, tgt)):
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        save_dataset(ds, path)
    # TTDS has no metadata slot, so provenance goes in a sidecar
    _write_json(_out(cfg, "gendata.json"), {
        **_stamp(cfg), "config": cfg.resolved(),
        "files": {k: {"path": p, "samples": len(d), "classes": d.n_classes,
                      "pixel_mean": float(d.x.mean()), "pixel_std": float(d.x.std())}
                  for (k, p), d in zip(paths.items(), (src, tgt))},
    })
    print(f"wrote {paths['source']} ({len(src)} samples) and {paths['target']} ({len(tgt)} samples)")
    return EXIT_OK


# -- metatrain -------------------------------------------------------------

def cmd_metatrain(cfg):
    src = _load_data(cfg.source_data, "source")
    spec, params = _load_model(cfg, src.sample_shape)
    schedule = MetaSchedule(cfg.meta_epochs, cfg.meta_episodes, cfg.meta_warmup, cfg.meta_base_lr,
                            cfg.meta_peak_lr, cfg.meta_final_lr, cfg.momentum, cfg.meta_way,
                            cfg.meta_shot, cfg.meta_query, cfg.temperature)
    ckpt = _out(cfg, "checkpoint.ttck")
    extra = {**_stamp(cfg), "config": cfg.resolved()}
    curve = []

    def on_epoch(epoch, loss, p):
        curve.append(loss)
        print(f"epoch {epoch + 1}/{schedule.epochs} loss {loss:.4f}", flush=True)

    def write_curve():
        _write_csv(_out(cfg, "loss_curve.csv"),
                   [{"epoch": i, "loss": repr(v), **_stamp(cfg)} for i, v in enumerate(curve)],
                   ["epoch", "loss", "config_hash", "seed"])

    try:
        params, _ = meta_train(spec, params, src.x, src.y, schedule, cfg.seed, on_epoch)
    except DivergenceError as exc:
        if exc.params is not None:
            save_checkpoint(spec, exc.params, ckpt, {**extra, "diverged_at_step": exc.step})
        write_curve()
        raise
    save_checkpoint(spec, params, ckpt, extra)
    write_curve()
    print(f"wrote {ckpt}")
    return EXIT_OK


# -- select ----------------------------------------------------------------

def cmd_select(cfg):
    tgt = _load_data(cfg.target_data, "target")
    spec, params = _load_model(cfg, tgt.sample_shape)
    budget = cfg.budget()
    episode = sample_episode(tgt.x, tgt.y, stream(cfg.seed, "sampler", 0))
    plan = build_plan(spec, params, episode, cfg.plan_source, budget, channel_ratio=cfg.ratio,
                      temperature=cfg.temperature, seed=cfg.seed, augment=cfg.augment(),
                      plan=_file_plan(cfg, spec), include_bias=cfg.include_bias)
    plan.budget = budget.to_dict()
    cost = plan_cost(spec, plan)
    if not fits(cost, budget):
        plan.warning = f"{plan.source} plan exceeds the budget"
    infeasible = plan.warning is not None
    _write_json(_out(cfg, "plan.json"), {**plan.to_dict(), **_stamp(cfg), "infeasible": infeasible})
    _write_json(_out(cfg, "cost.json"), {**cost.to_dict(spec), **_stamp(cfg), "budgets": budget.to_dict(),
                                         "fits": fits(cost, budget), "episode": episode.stats()})
    print(_summary(spec, plan, cost, budget))
    return EXIT_OK


def _summary(spec, plan, cost, budget):
    lines = [f"plan ({plan.source}): {len(plan)} layer(s)"]
    for e in plan.entries:
        layer = spec.layers[e.layer]
        lines.append(f"  {layer.name:<16} {len(e.channels):>4}/{layer.out_channels} channels")
    mem_cap = budget.mem_bytes
    mac_cap = budget.mac_cap(cost.model_macs)
    mem_use = f"{cost.total_mem} B" + (f" of {mem_cap} B ({100 * cost.total_mem / mem_cap:.1f}%)" if mem_cap else "")
    mac_use = f"{cost.backward_macs} MACs" + (
        f" of {int(mac_cap)} ({100 * cost.backward_macs / mac_cap:.1f}%)" if math.isfinite(mac_cap) else "")
    lines.append(f"memory  {mem_use}")
    lines.append(f"compute {mac_use}")
    if plan.warning:
        lines.append(f"warning: {plan.warning}")
    return "\n".join(lines)


# -- run -------------------------------------------------------------------

_CTX = {}


def _init_worker(ctx):
    _CTX.clear()
    _CTX.update(ctx)


def _trial(i):
    c = _CTX
    cfg = c["cfg"]
    episode = sample_episode(c["x"], c["y"], stream(cfg.seed, "sampler", i))
    res = adapt_episode(c["spec"], c["params"], episode, cfg.plan_source, cfg.budget(), cfg.iters, cfg.lr,
                        cfg.momentum, channel_ratio=cfg.ratio, temperature=cfg.temperature, seed=cfg.seed,
                        episode_index=i, augment=cfg.augment(), plan=c["plan"], include_bias=cfg.include_bias)
    row = {"trial": i, "accuracy": res.accuracy, "base_accuracy": res.base_accuracy,
           "infeasible": res.infeasible, "layers": res.plan.layers,
           "channels": int(sum(len(e.channels) for e in res.plan.entries)),
           "total_mem": res.cost.total_mem, "backward_macs": res.cost.backward_macs, **episode.stats()}
    timing = {"trial": i, "selection_seconds": res.selection_seconds, "total_seconds": res.total_seconds,
              "selection_fraction": res.selection_seconds / res.total_seconds if res.total_seconds else 0.0}
    return row, timing


def aggregate(values):
    """Mean, sample standard deviation and Student-t 95% confidence interval."""
    v = np.asarray(values, dtype=np.float64)
    n = len(v)
    mean = float(v.mean())
    std = float(v.std(ddof=1)) if n > 1 else 0.0
    half = float(stats.t.ppf(0.975, n - 1) * std / math.sqrt(n)) if n > 1 else 0.0
    return {"n": n, "mean": mean, "std": std, "ci95_low": mean - half, "ci95_high": mean + half,
            "ci95_half_width": half}


def cmd_run(cfg):
    tgt = _load_data(cfg.target_data, "target")
    spec, params = _load_model(cfg, tgt.sample_shape)
    ctx = {"cfg": cfg, "spec": spec, "params": params, "x": tgt.x, "y": tgt.y, "plan": _file_plan(cfg, spec)}
    t0 = time.perf_counter()
    if cfg.jobs > 1:
        with ProcessPoolExecutor(cfg.jobs, initializer=_init_worker, initargs=(ctx,)) as pool:
            results = list(pool.map(_trial, range(cfg.trials)))
    else:
        _init_worker(ctx)
        results = [_trial(i) for i in range(cfg.trials)]
    rows = [r for r, _ in results]
    timings = [t for _, t in results]
    agg = aggregate([r["accuracy"] for r in rows])
    base = aggregate([r["base_accuracy"] for r in rows])
    stamp = _stamp(cfg)
    _write_json(_out(cfg, "report.json"), {
        **stamp, "config": cfg.resolved(), "model": {"family": spec.family, "width": spec.width,
                                                     "fingerprint": spec.fingerprint()},
        "aggregate": agg, "base_aggregate": base, "trials": rows,
    })
    trial_cols = ["trial", "accuracy", "base_accuracy", "way", "support", "query", "channels", "total_mem",
                  "backward_macs", "infeasible", "config_hash", "seed"]
    _write_csv(_out(cfg, "trials.csv"),
               [{**{k: r[k] for k in trial_cols[:-2]}, **stamp} for r in rows], trial_cols)
    agg_cols = ["plan_source", "n", "mean", "std", "ci95_low", "ci95_high", "ci95_half_width",
                "base_mean", "config_hash", "seed"]
    _write_csv(_out(cfg, "aggregate.csv"),
               [{"plan_source": cfg.plan_source, **agg, "base_mean": base["mean"], **stamp}], agg_cols)
    fractions = [t["selection_fraction"] for t in timings]
    _write_json(_out(cfg, "timing.json"), {
        **stamp, "jobs": cfg.jobs, "wall_seconds": time.perf_counter() - t0, "trials": timings,
        "mean_selection_fraction": float(np.mean(fractions)),
    })
    print(f"{cfg.plan_source}: accuracy {100 * agg['mean']:.2f} +- {100 * agg['ci95_half_width']:.2f} "
          f"(frozen backbone {100 * base['mean']:.2f}) over {agg['n']} trials")
    return EXIT_OK


# -- analyze ---------------------------------------------------------------

def cmd_analyze(cfg):
    tgt = _load_data(cfg.target_data, "target")
    spec, params = _load_model(cfg, tgt.sample_shape)
    episodes = [sample_episode(tgt.x, tgt.y, stream(cfg.seed, "sampler", i)) for i in range(cfg.sweep_episodes)]
    result = single_layer_sweep(spec, params, episodes, cfg.sweep_ratios, iters=cfg.iters, lr=cfg.lr,
                                momentum=cfg.momentum, temperature=cfg.temperature, augment=cfg.augment(),
                                seed=cfg.seed, include_bias=cfg.include_bias)
    stamp = _stamp(cfg)
    buf = io.StringIO(result.to_csv())
    rows = list(csv.DictReader(buf))
    cols = list(rows[0].keys()) if rows else ["layer_index", "ratio", "gain", "gain_per_param", "gain_per_mac"]
    _write_csv(_out(cfg, "sweep.csv"), [{**r, **stamp} for r in rows], cols + ["config_hash", "seed"])
    _write_json(_out(cfg, "sweep.json"), {**result.to_dict(), **stamp, "config": cfg.resolved()})
    print(f"swept {len(spec.weight_layers)} layers x {len(cfg.sweep_ratios)} ratios over {len(episodes)} episodes")
    return EXIT_OK


COMMANDS = {"gendata": cmd_gendata, "metatrain": cmd_metatrain, "select": cmd_select,
            "run": cmd_run, "analyze": cmd_analyze}


def build_parser():
    parser = argparse.ArgumentParser(prog="sparsetune", description="Budget-aware sparse fine-tuning harness.")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {"gendata": "generate the toy source/target datasets",
             "metatrain": "episodic meta-training of the backbone",
             "select": "pick layers and channels for one episode",
             "run": "meta-test over many episodes",
             "analyze": "single-layer fine-tuning sweep"}
    for name in COMMANDS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--seed", type=int)
        p.add_argument("--jobs", type=int)
        p.add_argument("--budget-mem", help="bytes (suffix KB/MB allowed) or 'none'")
        p.add_argument("--budget-mac", help="absolute MACs, a fraction such as 0.15 or 15%%, or 'none'")
        p.add_argument("--ratio", type=float, help="fraction of channels per selected layer")
        p.add_argument("--iters", type=int, help="fine-tuning iterations per episode")
        p.add_argument("--trials", type=int)
        p.add_argument("--plan-source")
        p.add_argument("--plan-file")
        p.add_argument("--checkpoint")
        p.add_argument("--source-data")
        p.add_argument("--target-data")
        p.add_argument("--out", help="output directory")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override any configuration key")
    return parser


def resolve(args):
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k] = v
    for flag, key in _FLAG_KEYS.items():
        v = getattr(args, flag)
        if v is not None:
            overrides[key] = v
    return load_config(args.config, overrides)


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve(args)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ArtifactMismatchError, CheckpointError, SamplingError, StructuralError) as exc:
        print(f"artifact mismatch: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
