"""Backward-pass memory and compute accounting for update plans.

Memory counts the weights being updated, their gradient and momentum buffers, and
the saved layer inputs needed for those weight gradients. Forward-pass memory is
deliberately not modelled. Backward MACs are weight-gradient MACs of the selected
channels plus input-gradient MACs of every layer downstream of the earliest selected
layer (gradients must flow through them; the earliest layer itself does not
propagate further).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

_FIELDS = ("model_mem", "optimiser_mem", "activation_mem", "backward_macs")


@dataclass(frozen=True)
class Budget:
    """Backward-pass budget. ``None`` means unbounded.

    The compute limit is either an absolute MAC count (``macs``) or a fraction of the
    model's forward MACs (``mac_fraction``). Limits are inclusive.
    """

    mem_bytes: int | None = None
    macs: int | None = None
    mac_fraction: float | None = None

    def __post_init__(self):
        if self.macs is not None and self.mac_fraction is not None:
            raise ValueError("give either macs or mac_fraction, not both")
        for name in ("mem_bytes", "macs", "mac_fraction"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ValueError(f"budget {name} must be strictly positive (or None for unbounded)")

    @classmethod
    def unbounded(cls):
        return cls()

    def mac_cap(self, model_macs):
        if self.macs is not None:
            return self.macs
        if self.mac_fraction is not None:
            return self.mac_fraction * model_macs
        return math.inf

    def to_dict(self):
        return asdict(self)


@dataclass
class CostReport:
    model_mem: int = 0
    optimiser_mem: int = 0
    activation_mem: int = 0
    backward_macs: int = 0
    model_macs: int = 0
    per_layer: dict = field(default_factory=dict)  # layer index -> dict of the four components

    @property
    def total_mem(self):
        return self.model_mem + self.optimiser_mem + self.activation_mem

    def to_dict(self, spec=None):
        per_layer = []
        for idx in sorted(self.per_layer):
            row = {"layer": idx, **{k: int(self.per_layer[idx][k]) for k in _FIELDS}}
            if spec is not None:
                row["name"] = spec.layers[idx].name
            per_layer.append(row)
        return {**{k: int(getattr(self, k)) for k in _FIELDS},
                "total_mem": int(self.total_mem), "model_macs": int(self.model_macs),
                "per_layer": per_layer}

    def to_json(self, spec=None):
        return json.dumps(self.to_dict(spec), sort_keys=True, indent=2)


def _itemsize(dtype):
    return np.dtype(dtype).itemsize


def weight_grad_macs(layer, n_channels):
    """MACs to form weight gradients for ``n_channels`` output channels, one example."""
    return layer.mac_count * n_channels // layer.out_channels


def plan_cost(spec, plan, batch=1, dtype="float32"):
    plan.validate(spec)
    size = _itemsize(dtype)
    report = CostReport(model_macs=spec.total_macs)
    if plan.is_empty():
        return report
    rows = {}
    for e in plan.entries:
        layer = spec.layers[e.layer]
        n = len(e.channels)
        weights = n * layer.weights_per_channel + (n if e.bias else 0)
        rows[e.layer] = {
            "model_mem": weights * size,
            "optimiser_mem": 2 * weights * size,
            "activation_mem": math.prod(layer.in_shape) * size * batch,
            "backward_macs": weight_grad_macs(layer, n) * batch,
        }
    earliest = min(rows)
    for idx in range(earliest + 1, len(spec.layers)):
        macs = spec.layers[idx].mac_count * batch
        row = rows.setdefault(idx, dict.fromkeys(_FIELDS, 0))
        row["backward_macs"] += macs
    report.per_layer = rows
    for k in _FIELDS:
        setattr(report, k, sum(r[k] for r in rows.values()))
    return report


def fits(report, budget):
    """Inclusive budget check on total backward memory and backward MACs."""
    mem_ok = budget.mem_bytes is None or report.total_mem <= budget.mem_bytes
    return mem_ok and report.backward_macs <= budget.mac_cap(report.model_macs)

