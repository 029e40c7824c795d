"""Forward/backward kernels over a :class:`~sparsetune.arch.ModelSpec`.

Tensors are plain numpy arrays in (N, C, H, W) layout. The forward pass runs in
the parameters' dtype; the backward pass always accumulates in float64.

Only what backward needs is cached: inputs of trainable layers (for weight
gradients), outputs of layers with Fisher statistics requested, and ReLU6 masks
of layers that gradients must flow through. Backward stops at the earliest
layer that needs anything, and that layer does not propagate to its input.
"""

from __future__ import annotations

from collections import defaultdict
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from .arch import ADD, CONV2D, DEPTHWISE, GAP, LINEAR, POINTWISE, RELU6, ParamStore
from .errors import ContractError, NumericError, StructuralError


class Instrument:
    """Counts passes and the multiply-accumulates the backward kernels actually execute."""

    def __init__(self):
        self.forward_calls = 0
        self.backward_calls = 0
        self.backward_macs = 0
        self.per_layer = defaultdict(int)


_instruments = []


@contextmanager
def instrument():
    inst = Instrument()
    _instruments.append(inst)
    try:
        yield inst
    finally:
        _instruments.remove(inst)


def _tally(layer_index, macs):
    for inst in _instruments:
        inst.backward_macs += int(macs)
        inst.per_layer[layer_index] += int(macs)


class ActivationCache:
    """Per-pass storage filled by :func:`forward` and consumed by :func:`backward`.

    ``trainable`` and ``fisher`` are sets of layer indices.
    """

    def __init__(self, trainable=(), fisher=()):
        self.trainable = frozenset(int(i) for i in trainable)
        self.fisher = frozenset(int(i) for i in fisher)
        self.entries = {}
        self.outputs = {}
        self.masks = {}
        self.batch_count = 0

    @property
    def start(self):
        wanted = self.trainable | self.fisher
        return min(wanted) if wanted else None

    def stored_tensors(self):
        return len(self.entries) + len(self.outputs) + len(self.masks)


@dataclass
class LayerGrad:
    channels: np.ndarray | None  # None = every output channel
    weight: np.ndarray
    bias: np.ndarray


@dataclass
class GradientSet:
    weights: dict  # layer index -> LayerGrad
    activations: dict  # layer index -> dL/d(layer output), float64


def _pad(x, p):
    if p == 0:
        return x
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=x.dtype)
    out[:, :, p:p + h, p:p + w] = x
    return out


def _flat(x):
    n, c = x.shape[:2]
    return x.reshape(n, c, -1)


def _window(xp, i, j, stride, h_out, w_out):
    return xp[:, :, i:i + stride * (h_out - 1) + 1:stride, j:j + stride * (w_out - 1) + 1:stride]


def _conv_forward(x, w, b, layer):
    if layer.kind == POINTWISE:
        out = np.matmul(w[:, :, 0, 0], _flat(x)) + b[:, None]
        return out.reshape((x.shape[0],) + tuple(layer.out_shape))
    k, s, p = layer.kernel, layer.stride, layer.padding
    _, h_out, w_out = layer.out_shape
    xp = _pad(x, p)
    out = None
    for i in range(k):
        for j in range(k):
            part = np.tensordot(_window(xp, i, j, s, h_out, w_out), w[:, :, i, j], axes=([1], [1]))
            out = part if out is None else out + part
    out = out.transpose(0, 3, 1, 2) + b[None, :, None, None]
    return np.ascontiguousarray(out)


def _depthwise_forward(x, w, b, layer):
    k, s, p = layer.kernel, layer.stride, layer.padding
    _, h_out, w_out = layer.out_shape
    xp = _pad(x, p)
    out = np.zeros((x.shape[0], x.shape[1], h_out, w_out), dtype=np.result_type(x, w))
    for i in range(k):
        for j in range(k):
            out += _window(xp, i, j, s, h_out, w_out) * w[None, :, 0, i, j, None, None]
    return out + b[None, :, None, None]


def forward(spec, params, x, cache=None):
    """Evaluate the backbone on a batch ``x`` of shape (N, C, H, W); returns (N, feature_dim)."""
    x = np.asarray(x)
    if x.ndim != 4 or tuple(x.shape[1:]) != tuple(spec.input_shape):
        raise StructuralError(f"input shape {x.shape[1:]} does not match model input {spec.input_shape}")
    start = None
    if cache is not None:
        n_layers = len(spec.layers)
        for i in cache.trainable | cache.fisher:
            if not 0 <= i < n_layers or not spec.layers[i].has_weights:
                raise ContractError(f"layer index {i} cannot carry gradients")
        start = cache.start
        cache.entries.clear()
        cache.outputs.clear()
        cache.masks.clear()
        cache.batch_count = x.shape[0]
    outs = []
    h = x
    for idx, layer in enumerate(spec.layers):
        if cache is not None and idx in cache.trainable:
            cache.entries[idx] = h
        kind = layer.kind
        if kind in (CONV2D, POINTWISE):
            t = params[layer.name]
            h = _conv_forward(h, t["weight"], t["bias"], layer)
        elif kind == DEPTHWISE:
            t = params[layer.name]
            h = _depthwise_forward(h, t["weight"], t["bias"], layer)
        elif kind == LINEAR:
            t = params[layer.name]
            h = h @ t["weight"].T + t["bias"]
        elif kind == RELU6:
            if start is not None and idx > start:
                cache.masks[idx] = (h > 0) & (h < 6)
            h = np.clip(h, 0, 6)
        elif kind == GAP:
            h = h.mean(axis=(2, 3))
        elif kind == ADD:
            h = h + (x if layer.skip == -1 else outs[layer.skip])
        if cache is not None and idx in cache.fisher:
            cache.outputs[idx] = h
        outs.append(h)
    for inst in _instruments:
        inst.forward_calls += 1
    return h


def _check_finite(arr, layer, what):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite {what} in layer {layer.name!r}", layer=layer.name)


def _weight_grad(layer, idx, x, g, channels):
    """Gradients of the selected output channels' weights and biases."""
    x = x.astype(np.float64, copy=False)
    gs = g if channels is None else g[:, channels]
    kind = layer.kind
    if kind == LINEAR:
        _tally(idx, gs.shape[1] * x.shape[1] * gs.shape[0])
        return gs.T @ x, gs.sum(axis=0)
    if kind == POINTWISE:
        g3, x3 = _flat(gs), _flat(x)
        _tally(idx, g3.shape[1] * x3.size)
        dw = np.tensordot(g3, x3, axes=([0, 2], [0, 2]))
        return dw[:, :, None, None], g3.sum(axis=(0, 2))
    k, s, p = layer.kernel, layer.stride, layer.padding
    n, _, h_out, w_out = gs.shape
    xp = _pad(x, p)
    if kind == DEPTHWISE:
        xs = xp if channels is None else xp[:, channels]
        dw = np.empty((gs.shape[1], 1, k, k))
        for i in range(k):
            for j in range(k):
                win = _window(xs, i, j, s, h_out, w_out)
                dw[:, 0, i, j] = np.einsum("nchw,nchw->c", gs, win)
                _tally(idx, win.size)
    else:
        dw = np.empty((gs.shape[1], x.shape[1], k, k))
        for i in range(k):
            for j in range(k):
                win = _window(xp, i, j, s, h_out, w_out)
                dw[:, :, i, j] = np.tensordot(gs, win, axes=([0, 2, 3], [0, 2, 3]))
                _tally(idx, gs.shape[1] * win.size)
    return dw, gs.sum(axis=(0, 2, 3))


def _input_grad(layer, idx, w, g):
    kind = layer.kind
    w = w.astype(np.float64, copy=False)
    if kind == LINEAR:
        _tally(idx, g.shape[0] * g.shape[1] * w.shape[1])
        return g @ w
    c_in, h_in, w_in = layer.in_shape
    if kind == POINTWISE:
        g3 = _flat(g)
        _tally(idx, g3.size * c_in)
        return np.matmul(w[:, :, 0, 0].T, g3).reshape(g.shape[0], c_in, h_in, w_in)
    k, s, p = layer.kernel, layer.stride, layer.padding
    n, c_out, h_out, w_out = g.shape
    dxp = np.zeros((n, c_in, h_in + 2 * p, w_in + 2 * p))
    for i in range(k):
        for j in range(k):
            if kind == DEPTHWISE:
                contrib = g * w[None, :, 0, i, j, None, None]
                _tally(idx, g.size)
            else:
                contrib = np.tensordot(g, w[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
                _tally(idx, g.size * c_in)
            _window(dxp, i, j, s, h_out, w_out)[...] += contrib
    if p:
        dxp = dxp[:, :, p:p + h_in, p:p + w_in]
    return dxp


def backward(spec, params, cache, loss_grad, channels=None):
    """Backpropagate ``loss_grad`` (dL/d embedding) through the cached pass.

    ``channels`` maps a trainable layer index to the output channels whose weight
    gradients are wanted (default: all). Returns a :class:`GradientSet` with weight
    gradients for every trainable layer and activation gradients for every layer in
    ``cache.fisher``.
    """
    channels = channels or {}
    start = cache.start
    if start is None:
        return GradientSet({}, {})
    if cache.batch_count < 1:
        raise ContractError("activation cache is empty; run forward() with this cache first")
    for i in cache.trainable:
        if i not in cache.entries:
            raise ContractError(f"activation cache has no entry for trainable layer {spec.layers[i].name!r}")
    for i in cache.fisher:
        if i not in cache.outputs:
            raise ContractError(f"activation cache has no output for layer {spec.layers[i].name!r}")
    loss_grad = np.asarray(loss_grad, dtype=np.float64)
    expected = (cache.batch_count, spec.feature_dim)
    if loss_grad.shape != expected:
        raise StructuralError(f"loss gradient shape {loss_grad.shape} does not match embedding {expected}")

    pending = {len(spec.layers) - 1: loss_grad}
    weights, acts = {}, {}

    def push(j, grad):
        if j < start:
            return
        pending[j] = pending[j] + grad if j in pending else grad

    for idx in range(len(spec.layers) - 1, start - 1, -1):
        g = pending.pop(idx, None)
        if g is None:
            continue
        layer = spec.layers[idx]
        if idx in cache.fisher:
            acts[idx] = g
        if idx in cache.trainable:
            sel = channels.get(idx)
            sel = None if sel is None else np.asarray(sel, dtype=np.intp)
            dw, db = _weight_grad(layer, idx, cache.entries[idx], g, sel)
            _check_finite(dw, layer, "weight gradient")
            weights[idx] = LayerGrad(sel, dw, db)
        if idx == start:
            break
        kind = layer.kind
        if layer.has_weights:
            gi = _input_grad(layer, idx, params[layer.name]["weight"], g)
        elif kind == RELU6:
            gi = g * cache.masks[idx]
        elif kind == GAP:
            c, h, w = layer.in_shape
            gi = np.broadcast_to(g[:, :, None, None] / (h * w), (g.shape[0], c, h, w))
        else:  # residual add
            gi = g
            if layer.skip >= 0:
                push(layer.skip, g)
        push(idx - 1, gi)
    for inst in _instruments:
        inst.backward_calls += 1
    return GradientSet(weights, acts)


def sgd_momentum_step(spec, params, grads, lr, momentum, velocity=None, plan=None):
    """One SGD-with-momentum update: ``v <- momentum * v + g; w <- w - lr * v``.

    Only layers in ``plan`` (or, without a plan, every layer present in ``grads``)
    change; all other arrays are shared unchanged with ``params``. ``velocity`` maps
    ``(layer name, "weight"|"bias")`` to buffers covering the selected channels only.
    Returns ``(new_params, velocity)``.
    """
    if not lr > 0:
        raise ValueError("learning rate must be positive")
    if not 0 <= momentum < 1:
        raise ValueError("momentum must lie in [0, 1)")
    velocity = {} if velocity is None else dict(velocity)
    if plan is None:
        targets = [(i, lg.channels, True) for i, lg in grads.weights.items()]
    else:
        targets = [(e.layer, e.channel_array(spec), e.bias) for e in plan.entries]
    tensors = dict(params.tensors)
    for idx, sel, with_bias in targets:
        layer = spec.layers[idx]
        lg = grads.weights.get(idx)
        if lg is None:
            raise ContractError(f"no gradient for planned layer {layer.name!r}")
        if not _same_channels(lg.channels, sel, layer.out_channels):
            raise ContractError(f"gradient channels do not match the plan for layer {layer.name!r}")
        _check_finite(lg.weight, layer, "weight gradient")
        _check_finite(lg.bias, layer, "bias gradient")
        old = params[layer.name]
        new = dict(old)
        parts = [("weight", lg.weight)] + ([("bias", lg.bias)] if with_bias else [])
        for kind, grad in parts:
            key = (layer.name, kind)
            v = velocity.get(key)
            v = grad if v is None else momentum * v + grad
            velocity[key] = v
            w = old[kind].copy()
            if sel is None:
                w = (w - lr * v).astype(w.dtype)
            else:
                w[sel] = (w[sel] - lr * v).astype(w.dtype)
            new[kind] = w
        tensors[layer.name] = new
    return ParamStore(tensors, params.version + 1), velocity


def _same_channels(a, b, n):
    a = np.arange(n) if a is None else np.asarray(a)
    b = np.arange(n) if b is None else np.asarray(b)
    return a.shape == b.shape and bool(np.all(a == b))
