"""Declarative backbone descriptions and weight storage.

A :class:`ModelSpec` is a flat, ordered list of :class:`Layer` records. Layer
``i`` consumes the output of layer ``i - 1`` (the model input for ``i == 0``);
a ``residual-add`` layer additionally adds the output of layer ``skip``
(``skip == -1`` means the model input). Parameter and MAC counts are derived
from the hyperparameters alone, so plans and costs never need weights.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import StructuralError

CONV2D = "conv2d"
DEPTHWISE = "depthwise-conv2d"
POINTWISE = "pointwise-conv2d"
RELU6 = "relu6"
GAP = "global-avg-pool"
LINEAR = "linear"
ADD = "residual-add"

LAYER_KINDS = (CONV2D, DEPTHWISE, POINTWISE, RELU6, GAP, LINEAR, ADD)
WEIGHT_KINDS = (CONV2D, DEPTHWISE, POINTWISE, LINEAR)
FAMILIES = ("mobilenet-v2-like", "micro-cnn")


def conv_out(size, kernel, stride, padding):
    return (size + 2 * padding - kernel) // stride + 1


@dataclass(frozen=True)
class Layer:
    name: str
    kind: str
    in_shape: tuple
    out_shape: tuple
    kernel: int = 1
    stride: int = 1
    padding: int = 0
    skip: int | None = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise StructuralError(f"{self.name}: unknown layer kind {self.kind!r}")
        if self.kind == POINTWISE and self.kernel != 1:
            raise StructuralError(f"{self.name}: pointwise conv must have kernel 1")
        if self.kind == DEPTHWISE and self.in_shape[0] != self.out_shape[0]:
            raise StructuralError(f"{self.name}: depthwise conv must keep the channel count")

    @property
    def has_weights(self):
        return self.kind in WEIGHT_KINDS

    @property
    def in_channels(self):
        return self.in_shape[0]

    @property
    def out_channels(self):
        return self.out_shape[0]

    @property
    def weight_shape(self):
        c_in, c_out, k = self.in_channels, self.out_channels, self.kernel
        if self.kind == CONV2D:
            return (c_out, c_in, k, k)
        if self.kind == POINTWISE:
            return (c_out, c_in, 1, 1)
        if self.kind == DEPTHWISE:
            return (c_out, 1, k, k)
        if self.kind == LINEAR:
            return (c_out, c_in)
        return None

    @property
    def weights_per_channel(self):
        """Weight scalars belonging to one output channel (bias excluded)."""
        shape = self.weight_shape
        return 0 if shape is None else math.prod(shape[1:])

    @property
    def param_count(self):
        if not self.has_weights:
            return 0
        return self.out_channels * (self.weights_per_channel + 1)

    @property
    def spatial_out(self):
        """Output positions per channel (``D`` in the Fisher formula); 1 for vectors."""
        return math.prod(self.out_shape[1:]) if len(self.out_shape) == 3 else 1

    @property
    def mac_count(self):
        return count_macs(self)

    def to_dict(self):
        d = asdict(self)
        d["in_shape"] = list(self.in_shape)
        d["out_shape"] = list(self.out_shape)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["in_shape"] = tuple(d["in_shape"])
        d["out_shape"] = tuple(d["out_shape"])
        return cls(**d)


def count_macs(layer, input_spatial=None):
    """Multiply-accumulates of one forward evaluation of ``layer`` for a single example.

    ``input_spatial`` overrides the declared input (H, W); the output size is then
    recomputed with the layer's kernel/stride/padding.
    """
    kind = layer.kind
    if kind in (RELU6, GAP, ADD):
        return 0
    if kind == LINEAR:
        return layer.in_channels * layer.out_channels
    if input_spatial is None:
        h_out, w_out = layer.out_shape[1:]
    else:
        h, w = input_spatial
        h_out = conv_out(h, layer.kernel, layer.stride, layer.padding)
        w_out = conv_out(w, layer.kernel, layer.stride, layer.padding)
    k2 = layer.kernel * layer.kernel
    if kind == CONV2D:
        return layer.out_channels * layer.in_channels * k2 * h_out * w_out
    if kind == POINTWISE:
        return layer.out_channels * layer.in_channels * h_out * w_out
    return layer.out_channels * k2 * h_out * w_out  # depthwise


@dataclass(frozen=True)
class ModelSpec:
    family: str
    width: float
    input_shape: tuple
    layers: tuple
    feature_dim: int
    options: dict = field(default_factory=dict, compare=True, hash=False)

    def __post_init__(self):
        shape = tuple(self.input_shape)
        for i, layer in enumerate(self.layers):
            if tuple(layer.in_shape) != shape:
                prev = self.layers[i - 1].name if i else "<input>"
                raise StructuralError(
                    f"shape mismatch between {prev!r} (out {shape}) and "
                    f"{layer.name!r} (in {tuple(layer.in_shape)})"
                )
            if layer.kind == ADD:
                if layer.skip is None or not -1 <= layer.skip < i - 1:
                    raise StructuralError(f"{layer.name}: invalid skip index {layer.skip}")
                skip_shape = self.input_shape if layer.skip == -1 else self.layers[layer.skip].out_shape
                if tuple(skip_shape) != tuple(layer.in_shape):
                    src = "<input>" if layer.skip == -1 else self.layers[layer.skip].name
                    raise StructuralError(
                        f"shape mismatch between skip source {src!r} and {layer.name!r}"
                    )
            shape = tuple(layer.out_shape)
        if self.layers and math.prod(shape) != self.feature_dim:
            raise StructuralError(
                f"final layer {self.layers[-1].name!r} emits {shape}, expected feature_dim {self.feature_dim}"
            )

    def __len__(self):
        return len(self.layers)

    @property
    def weight_layers(self):
        return [i for i, layer in enumerate(self.layers) if layer.has_weights]

    @property
    def param_counts(self):
        return [layer.param_count for layer in self.layers]

    @property
    def mac_counts(self):
        return [layer.mac_count for layer in self.layers]

    @property
    def total_params(self):
        return sum(self.param_counts)

    @property
    def total_macs(self):
        return sum(self.mac_counts)

    def index_of(self, name):
        for i, layer in enumerate(self.layers):
            if layer.name == name:
                return i
        raise KeyError(name)

    def to_dict(self):
        return {
            "family": self.family,
            "width": self.width,
            "input_shape": list(self.input_shape),
            "feature_dim": self.feature_dim,
            "options": dict(self.options),
            "layers": [layer.to_dict() for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            family=d["family"],
            width=d["width"],
            input_shape=tuple(d["input_shape"]),
            layers=tuple(Layer.from_dict(x) for x in d["layers"]),
            feature_dim=d["feature_dim"],
            options=dict(d.get("options", {})),
        )

    def fingerprint(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def make_divisible(value, divisor=8, min_value=None):
    """Round ``value`` to the nearest multiple of ``divisor`` (at least ``min_value``),
    bumping up one step if rounding lost more than 10%."""
    min_value = divisor if min_value is None else min_value
    out = max(min_value, int(value + divisor / 2) // divisor * divisor)
    if out < 0.9 * value:
        out += divisor
    return out


class WidthMultiplier:
    def __init__(self, value):
        value = float(value)
        if not value > 0 or not math.isfinite(value):
            raise ValueError(f"width multiplier must be positive, got {value}")
        self.value = value

    def raw(self, channels):
        return channels * self.value

    def scale(self, channels):
        return make_divisible(self.raw(channels))

    def __repr__(self):
        return f"WidthMultiplier({self.value})"


class _Builder:
    def __init__(self, input_shape):
        self.shape = tuple(input_shape)
        self.layers = []

    def add(self, name, kind, out_channels=None, kernel=1, stride=1, skip=None):
        c, *spatial = self.shape
        if kind in (CONV2D, DEPTHWISE, POINTWISE):
            padding = kernel // 2
            h, w = spatial
            out = (out_channels if kind != DEPTHWISE else c,
                   conv_out(h, kernel, stride, padding), conv_out(w, kernel, stride, padding))
        elif kind == LINEAR:
            padding, out = 0, (out_channels,)
        elif kind == GAP:
            padding, out = 0, (c,)
        else:
            padding, out = 0, self.shape
        self.layers.append(Layer(name, kind, self.shape, out, kernel, stride, padding, skip))
        self.shape = out
        return len(self.layers) - 1

    def inverted_residual(self, name, out_channels, stride, expansion):
        c_in = self.shape[0]
        entry = len(self.layers) - 1
        hidden = c_in * expansion
        if expansion != 1:
            self.add(f"{name}.expand", POINTWISE, hidden)
            self.add(f"{name}.expand.act", RELU6)
        self.add(f"{name}.dw", DEPTHWISE, kernel=3, stride=stride)
        self.add(f"{name}.dw.act", RELU6)
        self.add(f"{name}.project", POINTWISE, out_channels)
        if stride == 1 and c_in == out_channels:
            self.add(f"{name}.add", ADD, skip=entry)


# (expansion, channels, repeats, first stride)
_MBV2_SETTINGS = (
    (1, 16, 1, 1),
    (6, 24, 2, 2),
    (6, 32, 3, 2),
    (6, 64, 4, 2),
    (6, 96, 3, 1),
    (6, 160, 3, 2),
    (6, 320, 1, 1),
)


def build_backbone(family, width=1.0, input_shape=(3, 128, 128), *, blocks=2, channels=8,
                   expansion=2, head_channels=None, feature_dim=16):
    """Build a backbone spec.

    ``mobilenet-v2-like`` follows the 17-block inverted-residual schedule with a
    scaled 1280-channel head and no classifier. ``micro-cnn`` is a desk-scale
    variant: stride-2 3x3 stem, ``blocks`` (1-4) inverted residuals, a pointwise head,
    global pooling and a linear embedding of size ``feature_dim``.
    """
    if family not in FAMILIES:
        raise ValueError(f"unknown family {family!r}; expected one of {FAMILIES}")
    mult = WidthMultiplier(width)
    input_shape = tuple(int(v) for v in input_shape)
    if len(input_shape) != 3 or min(input_shape) < 1:
        raise ValueError(f"input_shape must be (C, H, W), got {input_shape}")
    b = _Builder(input_shape)

    if family == "mobilenet-v2-like":
        if input_shape[1] % 32 or input_shape[2] % 32:
            raise ValueError("mobilenet-v2-like needs spatial dims divisible by 32")
        b.add("stem", CONV2D, mult.scale(32), kernel=3, stride=2)
        b.add("stem.act", RELU6)
        idx = 0
        for t, c, n, s in _MBV2_SETTINGS:
            for r in range(n):
                idx += 1
                b.inverted_residual(f"block{idx}", mult.scale(c), s if r == 0 else 1, t)
        b.add("head", POINTWISE, mult.scale(1280))
        b.add("head.act", RELU6)
        b.add("pool", GAP)
        options = {}
    else:
        if not 1 <= blocks <= 4:
            raise ValueError("micro-cnn supports 1-4 blocks")
        n_down = 1 + blocks // 2
        if input_shape[1] % (2 ** n_down) or input_shape[2] % (2 ** n_down):
            raise ValueError(f"micro-cnn with {blocks} blocks needs spatial dims divisible by {2 ** n_down}")
        base = mult.scale(channels)
        b.add("stem", CONV2D, base, kernel=3, stride=2)
        b.add("stem.act", RELU6)
        for i in range(blocks):
            out = base * 2 ** ((i + 1) // 2)
            b.inverted_residual(f"block{i + 1}", out, 2 if i % 2 else 1, expansion)
        head = mult.scale(head_channels) if head_channels else 2 * b.shape[0]
        b.add("head", POINTWISE, head)
        b.add("head.act", RELU6)
        b.add("pool", GAP)
        b.add("embed", LINEAR, feature_dim)
        options = {"blocks": blocks, "channels": channels, "expansion": expansion,
                   "head_channels": head_channels}
    return ModelSpec(family, float(width), input_shape, tuple(b.layers), math.prod(b.shape), options)


class ParamStore:
    """Weights and biases keyed by layer name.

    Arrays are treated as immutable: updates produce new arrays, so stores can share
    untouched tensors safely.
    """

    def __init__(self, tensors=None, version=0):
        self.tensors = {name: dict(t) for name, t in (tensors or {}).items()}
        self.version = version

    def __getitem__(self, name):
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def copy(self):
        return ParamStore({n: {k: v.copy() for k, v in t.items()} for n, t in self.tensors.items()},
                          self.version)

    def items(self):
        for name, t in self.tensors.items():
            for kind, arr in t.items():
                yield name, kind, arr

    def astype(self, dtype):
        return ParamStore({n: {k: v.astype(dtype) for k, v in t.items()} for n, t in self.tensors.items()},
                          self.version)

    def equals(self, other):
        """Bit-level equality of every tensor."""
        if set(self.tensors) != set(other.tensors):
            return False
        for name, kind, arr in self.items():
            o = other.tensors[name].get(kind)
            if o is None or o.dtype != arr.dtype or o.shape != arr.shape or o.tobytes() != arr.tobytes():
                return False
        return True

    def check(self, spec):
        for layer in spec.layers:
            if not layer.has_weights:
                continue
            t = self.tensors.get(layer.name)
            if t is None:
                raise StructuralError(f"missing parameters for layer {layer.name!r}")
            if t["weight"].shape != layer.weight_shape or t["bias"].shape != (layer.out_channels,):
                raise StructuralError(f"parameter shape mismatch for layer {layer.name!r}")
        return self


def init_params(spec, rng, dtype=np.float32):
    """He-normal weights, zero biases. Projection convs are scaled down so residual
    stacks start close to identity."""
    tensors = {}
    for layer in spec.layers:
        if not layer.has_weights:
            continue
        shape = layer.weight_shape
        fan_in = math.prod(shape[1:])
        std = math.sqrt(2.0 / fan_in)
        if layer.name.endswith(".project") or layer.kind == LINEAR:
            std = math.sqrt(1.0 / fan_in)
        tensors[layer.name] = {
            "weight": (rng.standard_normal(shape) * std).astype(dtype),
            "bias": np.zeros(layer.out_channels, dtype=dtype),
        }
    return ParamStore(tensors)
