"""Independent reference implementations used as test oracles.

Nothing here imports the engine kernels: layers are evaluated with explicit loops
over output positions so the production code is checked against a second,
straightforward reading of each operation.
"""

import math

import numpy as np

from sparsetune import engine
from sparsetune.arch import ParamStore, build_backbone, init_params
from sparsetune.rng import stream


def ref_conv(x, w, b, stride, pad, groups=1):
    """Direct convolution of one example x (C, H, W); w (O, C/groups, k, k)."""
    c, h, wd = x.shape
    o, cg, k, _ = w.shape
    xp = np.zeros((c, h + 2 * pad, wd + 2 * pad), dtype=np.float64)
    xp[:, pad:pad + h, pad:pad + wd] = x
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((o, ho, wo))
    per_group = o // groups
    for oc in range(o):
        g = oc // per_group
        src = xp[g * cg:(g + 1) * cg]
        for i in range(ho):
            for j in range(wo):
                patch = src[:, i * stride:i * stride + k, j * stride:j * stride + k]
                out[oc, i, j] = float(np.sum(patch * w[oc])) + float(b[oc])
    return out


def ref_forward(spec, params, x):
    """Loop-based evaluation of the whole backbone, one example at a time."""
    feats = []
    for example in np.asarray(x, dtype=np.float64):
        outs = []
        h = example
        for layer in spec.layers:
            kind = layer.kind
            if kind in ("conv2d", "pointwise-conv2d"):
                t = params[layer.name]
                h = ref_conv(h, t["weight"].astype(np.float64), t["bias"], layer.stride, layer.padding)
            elif kind == "depthwise-conv2d":
                t = params[layer.name]
                h = ref_conv(h, t["weight"].astype(np.float64), t["bias"], layer.stride, layer.padding,
                             groups=h.shape[0])
            elif kind == "relu6":
                h = np.minimum(np.maximum(h, 0.0), 6.0)
            elif kind == "global-avg-pool":
                h = np.array([ch.mean() for ch in h])
            elif kind == "linear":
                t = params[layer.name]
                w = t["weight"].astype(np.float64)
                h = np.array([sum(w[o, i] * h[i] for i in range(len(h))) for o in range(w.shape[0])]) + t["bias"]
            elif kind == "residual-add":
                h = h + (example if layer.skip == -1 else outs[layer.skip])
            outs.append(h)
        feats.append(h)
    return np.array(feats)


def ref_macs(layer):
    """Closed-form forward MACs of one layer."""
    if layer.kind in ("relu6", "global-avg-pool", "residual-add"):
        return 0
    if layer.kind == "linear":
        return layer.in_shape[0] * layer.out_shape[0]
    c_out, h_out, w_out = layer.out_shape
    c_in = layer.in_shape[0]
    k2 = layer.kernel ** 2
    if layer.kind == "depthwise-conv2d":
        return c_out * k2 * h_out * w_out
    return c_out * c_in * k2 * h_out * w_out


def ref_fisher(a, g):
    """Per-channel Fisher values with explicit loops over examples and channels."""
    n, c = a.shape[:2]
    out = np.zeros(c)
    for o in range(c):
        total = 0.0
        for i in range(n):
            inner = float(np.dot(np.ravel(a[i, o]).astype(np.float64), np.ravel(g[i, o]).astype(np.float64)))
            total += inner * inner
        out[o] = total / (2 * n)
    return out


def micro(blocks=2, channels=8, expansion=2, feature_dim=8, size=16, **kw):
    return build_backbone("micro-cnn", 1.0, (3, size, size), blocks=blocks, channels=channels,
                          expansion=expansion, feature_dim=feature_dim, **kw)


def random_model(seed, blocks=2, channels=8, dtype=np.float32, **kw):
    spec = micro(blocks=blocks, channels=channels, **kw)
    params = init_params(spec, stream(seed, "init"), dtype)
    rng = np.random.default_rng(seed + 1000)
    # non-zero biases so every code path sees them
    tensors = {name: {"weight": t["weight"], "bias": (rng.standard_normal(t["bias"].shape) * 0.1).astype(dtype)}
               for name, t in params.tensors.items()}
    return spec, ParamStore(tensors)


def linear_loss(spec, params, x, r):
    return float(np.sum(engine.forward(spec, params, x) * r))


def gradcheck(spec, params, x, h=1e-5, floor=1e-5):
    """Largest relative error between analytic and central-difference gradients.

    ``params`` must be float64. The loss is ``sum(features * r)`` with fixed random ``r``.
    Relative error is ``|a - f| / max(|a|, |f|, floor)``.
    """
    r = np.random.default_rng(7).standard_normal((len(x), spec.feature_dim))
    cache = engine.ActivationCache(trainable=spec.weight_layers)
    engine.forward(spec, params, x, cache)
    grads = engine.backward(spec, params, cache, r)
    worst = 0.0
    for idx in spec.weight_layers:
        name = spec.layers[idx].name
        for kind, analytic in (("weight", grads.weights[idx].weight), ("bias", grads.weights[idx].bias)):
            base = params[name][kind]
            flat = base.ravel()
            for p in range(flat.size):
                vals = []
                for sign in (1, -1):
                    w = flat.copy()
                    w[p] += sign * h
                    t = dict(params.tensors)
                    t[name] = {**t[name], kind: w.reshape(base.shape)}
                    vals.append(linear_loss(spec, ParamStore(t), x, r))
                fd = (vals[0] - vals[1]) / (2 * h)
                a = float(analytic.ravel()[p])
                err = abs(a - fd) / max(abs(a), abs(fd), floor)
                worst = max(worst, err)
    return worst


def ceil_ratio(ratio, n):
    return max(1, min(n, math.ceil(round(ratio * n, 9))))


def kink_margin(spec, params, x):
    """Smallest distance of any ReLU6 input from the kinks at 0 and 6."""
    feeds = [i - 1 for i, layer in enumerate(spec.layers) if layer.kind == "relu6"]
    cache = engine.ActivationCache(fisher=[i for i in feeds if spec.layers[i].has_weights])
    engine.forward(spec, params, x, cache)
    return min(float(np.min(np.minimum(np.abs(z), np.abs(z - 6.0)))) for z in cache.outputs.values())


def smooth_instance(seed, margin=2e-4, batch=1, **kw):
    """Random float64 model and input whose ReLU6 inputs all stay ``margin`` away from
    the kinks, so central differences with small steps see a linear neighbourhood."""
    spec, params = random_model(seed, dtype=np.float64, **kw)
    rng = np.random.default_rng(seed)
    for _ in range(200):
        x = rng.standard_normal((batch,) + spec.input_shape)
        if kink_margin(spec, params, x) >= margin:
            return spec, params, x
    raise RuntimeError("no kink-free input found")
