"""Run configuration: ``key = value`` files, validation, defaults and hashing."""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, fields

from .cost import Budget
from .errors import ConfigError
from .training import PLAN_SOURCES

# execution-only settings that never change results
_UNHASHED = ("jobs", "out_dir")


def _opt_path(v):
    return v or None


def _parse_bytes(v):
    s = str(v).strip().lower().replace(" ", "")
    if s in ("", "none", "inf", "unbounded"):
        return None
    m = re.fullmatch(r"(\d+(?:\.\d+)?)(b|kb|k|mb|m)?", s)
    if not m:
        raise ValueError(f"not a byte count: {v!r}")
    scale = {None: 1, "b": 1, "k": 1024, "kb": 1024, "m": 1024 ** 2, "mb": 1024 ** 2}[m.group(2)]
    out = int(round(float(m.group(1)) * scale))
    if out <= 0:
        raise ValueError("memory budget must be positive")
    return out


def _parse_macs(v):
    """``none`` | integer MAC count | fraction of model MACs (``0.15`` or ``15%``)."""
    s = str(v).strip().lower()
    if s in ("", "none", "inf", "unbounded"):
        return None
    if s.endswith("%"):
        frac = float(s[:-1]) / 100
    elif "." in s or "e-" in s:
        frac = float(s)
    else:
        n = int(s)
        if n <= 0:
            raise ValueError("MAC budget must be positive")
        return n
    if not 0 < frac <= 1:
        raise ValueError("MAC fraction must lie in (0, 1]")
    return f"{frac!r}"


def _ratio_list(v):
    vals = [float(x) for x in str(v).split(",") if x.strip()]
    if not vals or any(not 0 < r <= 1 for r in vals):
        raise ValueError("ratios must lie in (0, 1]")
    return vals


def _pos_int(v):
    n = int(v)
    if n < 1:
        raise ValueError("must be a positive integer")
    return n


def _nonneg_int(v):
    n = int(v)
    if n < 0:
        raise ValueError("must be a non-negative integer")
    return n


def _pos_float(v):
    x = float(v)
    if not x > 0:
        raise ValueError("must be positive")
    return x


def _unit_float(v):
    x = float(v)
    if not 0 <= x < 1:
        raise ValueError("must lie in [0, 1)")
    return x


def _ratio(v):
    x = float(v)
    if not 0 < x <= 1:
        raise ValueError("must lie in (0, 1]")
    return x


def _prob(v):
    x = float(v)
    if not 0 <= x <= 1:
        raise ValueError("must lie in [0, 1]")
    return x


def _choice(options):
    def parse(v):
        if v not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return v
    return parse


def _bool(v):
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected a boolean")


@dataclass
class RunConfig:
    # model
    family: str = "micro-cnn"
    width: float = 1.0
    blocks: int = 2
    channels: int = 8
    expansion: int = 2
    feature_dim: int = 16
    image_size: int = 16
    # budgets and selection
    budget_mem: int | None = None
    budget_mac: object = None  # int (absolute) or str repr of a fraction
    ratio: float = 0.5
    plan_source: str = "tinytrain"
    plan_file: str | None = None
    include_bias: bool = True
    # fine-tuning
    iters: int = 40
    lr: float = 1e-3
    momentum: float = 0.9
    temperature: float = 0.1
    flip_prob: float = 0.5
    crop_pad: int = 2
    # evaluation
    trials: int = 200
    sweep_ratios: list = None
    sweep_episodes: int = 5
    seed: int = 0
    jobs: int = 1
    # meta-training (desk scale)
    meta_epochs: int = 20
    meta_episodes: int = 100
    meta_warmup: int = 1
    meta_base_lr: float = 1e-3
    meta_peak_lr: float = 0.05
    meta_final_lr: float = 1e-3
    meta_way: int = 5
    meta_shot: int = 5
    meta_query: int = 5
    # data
    source_data: str | None = "out/source.ttds"
    target_data: str | None = "out/target.ttds"
    checkpoint: str | None = None
    out_dir: str = "out"
    source_classes: int = 64
    target_classes: int = 20
    per_class: int = 20
    shift: float = 0.5

    def __post_init__(self):
        if self.sweep_ratios is None:
            self.sweep_ratios = [1.0, 0.5, 0.25, 0.125]

    # -- derived -------------------------------------------------------
    def budget(self):
        mac = self.budget_mac
        if isinstance(mac, str):
            return Budget(self.budget_mem, None, float(mac))
        return Budget(self.budget_mem, mac, None)

    def augment(self):
        return {"flip_prob": self.flip_prob, "crop_pad": self.crop_pad}

    def input_shape(self):
        return (3, self.image_size, self.image_size)

    def resolved(self):
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        for k in _UNHASHED:
            d.pop(k)
        return d

    def config_hash(self):
        blob = json.dumps(self.resolved(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def dumps(self):
        """Serialise back to the ``key = value`` file format."""
        lines = []
        for k, v in self.resolved().items():
            if v is None:
                v = "none" if k.startswith("budget") else ""
            elif isinstance(v, list):
                v = ",".join(repr(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{k} = {v}")
        return "\n".join(lines) + "\n"


_PARSERS = {
    "family": _choice(("micro-cnn", "mobilenet-v2-like")),
    "width": _pos_float,
    "blocks": _pos_int,
    "channels": _pos_int,
    "expansion": _pos_int,
    "feature_dim": _pos_int,
    "image_size": _pos_int,
    "budget_mem": _parse_bytes,
    "budget_mac": _parse_macs,
    "ratio": _ratio,
    "plan_source": _choice(PLAN_SOURCES),
    "plan_file": _opt_path,
    "include_bias": _bool,
    "iters": _nonneg_int,
    "lr": _pos_float,
    "momentum": _unit_float,
    "temperature": _pos_float,
    "flip_prob": _prob,
    "crop_pad": _nonneg_int,
    "trials": _pos_int,
    "sweep_ratios": _ratio_list,
    "sweep_episodes": _pos_int,
    "seed": lambda v: int(v) & (2 ** 64 - 1),
    "jobs": _pos_int,
    "meta_epochs": _nonneg_int,
    "meta_episodes": _pos_int,
    "meta_warmup": _nonneg_int,
    "meta_base_lr": _pos_float,
    "meta_peak_lr": _pos_float,
    "meta_final_lr": _pos_float,
    "meta_way": _pos_int,
    "meta_shot": _pos_int,
    "meta_query": _pos_int,
    "source_data": _opt_path,
    "target_data": _opt_path,
    "checkpoint": _opt_path,
    "out_dir": str,
    "source_classes": _pos_int,
    "target_classes": _pos_int,
    "per_class": _pos_int,
    "shift": float,
}


def _norm_key(k):
    return k.strip().lower().replace("-", "_")


def set_value(cfg, key, value, line=None):
    key = _norm_key(key)
    if key not in _PARSERS:
        raise ConfigError(f"unknown key {key!r}", line)
    try:
        parsed = _PARSERS[key](value.strip() if isinstance(value, str) else value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: {exc}", line) from None
    setattr(cfg, key, parsed)


def parse_config(text, cfg=None):
    cfg = cfg or RunConfig()
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", n)
        key, value = line.split("=", 1)
        set_value(cfg, key, value, n)
    return cfg


def load_config(path=None, overrides=None):
    """Defaults, then the file at ``path``, then ``overrides`` (flags win)."""
    cfg = RunConfig()
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        parse_config(text, cfg)
    for key, value in (overrides or {}).items():
        if value is not None:
            set_value(cfg, key, str(value))
    return cfg
