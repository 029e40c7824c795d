"""Update plans: which layers and output channels are trainable in one adaptation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import StructuralError


@dataclass(frozen=True)
class PlanEntry:
    layer: int
    channels: tuple
    bias: bool = True

    def channel_array(self, spec):
        """Sorted channel indices, or ``None`` when the entry covers the whole layer."""
        if len(self.channels) == spec.layers[self.layer].out_channels:
            return None
        return np.asarray(self.channels, dtype=np.intp)


@dataclass
class UpdatePlan:
    entries: list = field(default_factory=list)
    budget: dict | None = None
    channel_ratio: float | None = None
    seed: int | None = None
    scores: list = field(default_factory=list)
    source: str = "custom"
    warning: str | None = None
    skipped: list = field(default_factory=list)

    @property
    def layers(self):
        return [e.layer for e in self.entries]

    def __len__(self):
        return len(self.entries)

    def is_empty(self):
        return not self.entries

    def with_entry(self, entry):
        return UpdatePlan(self.entries + [entry], self.budget, self.channel_ratio, self.seed,
                          self.scores, self.source, self.warning, list(self.skipped))

    def validate(self, spec):
        seen = set()
        for e in self.entries:
            if not 0 <= e.layer < len(spec.layers):
                raise StructuralError(f"plan refers to layer {e.layer}, model has {len(spec.layers)}")
            layer = spec.layers[e.layer]
            if not layer.has_weights:
                raise StructuralError(f"plan selects layer {layer.name!r}, which has no weights")
            if e.layer in seen:
                raise StructuralError(f"plan selects layer {layer.name!r} twice")
            seen.add(e.layer)
            ch = e.channels
            if not ch or list(ch) != sorted(set(ch)) or ch[0] < 0 or ch[-1] >= layer.out_channels:
                raise StructuralError(f"invalid channel set for layer {layer.name!r}")
        return self

    def channel_map(self, spec):
        return {e.layer: e.channel_array(spec) for e in self.entries}

    def to_dict(self):
        return {
            "budgets": self.budget,
            "channel_ratio": self.channel_ratio,
            "seed": self.seed,
            "source": self.source,
            "warning": self.warning,
            "entries": [{"layer": e.layer, "channels": list(e.channels), "bias": e.bias}
                        for e in self.entries],
            "scores": self.scores,
            "skipped": list(self.skipped),
        }

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, d):
        entries = [PlanEntry(int(e["layer"]), tuple(sorted(int(c) for c in e["channels"])),
                             bool(e.get("bias", True))) for e in d.get("entries", [])]
        return cls(entries, d.get("budgets"), d.get("channel_ratio"), d.get("seed"),
                   list(d.get("scores", [])), d.get("source", "custom"), d.get("warning"),
                   [int(i) for i in d.get("skipped", [])])

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def full_plan(spec, source="full"):
    return UpdatePlan([PlanEntry(i, tuple(range(spec.layers[i].out_channels)), True)
                       for i in spec.weight_layers], source=source)


def last_layer_plan(spec):
    i = spec.weight_layers[-1]
    return UpdatePlan([PlanEntry(i, tuple(range(spec.layers[i].out_channels)), True)],
                      source="last-layer")


def single_layer_plan(spec, layer, channels, bias=True, source="single-layer"):
    return UpdatePlan([PlanEntry(layer, tuple(sorted(int(c) for c in channels)), bias)], source=source)
