"""Procedural multi-domain image datasets and the TTDS file format.

Each class is a mixture of two coloured oriented gratings with class-specific
orientation and frequency. Examples vary in phase, amplitude, channel offsets and
noise. The ``target`` render style differs from ``source``: square-wave gratings,
a different colour palette, lower contrast, stronger noise and a global pixel shift.
Half of the examples are mirrored left-right so every class is closed under
horizontal flips, which keeps flip augmentation label-preserving.

TTDS layout (little-endian)::

    b"TTDS" | version u32 | sample count u32 | class count u32 | ndims u32 | dims u32 * ndims
    | labels u32 * count | samples float32 * count * prod(dims)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import StructuralError
from .rng import stream

MAGIC = b"TTDS"
VERSION = 1


@dataclass
class Dataset:
    x: np.ndarray  # (N, C, H, W) float32
    y: np.ndarray  # (N,) int
    n_classes: int

    def __len__(self):
        return len(self.y)

    @property
    def sample_shape(self):
        return tuple(self.x.shape[1:])


STYLES = ("source", "target")


def _class_templates(n_classes, rng, style):
    lo, hi = (0.15, 0.45) if style == "source" else (0.2, 0.5)
    theta = rng.uniform(0, np.pi, size=(n_classes, 2))
    freq = rng.uniform(lo, hi, size=(n_classes, 2))
    colors = rng.standard_normal((n_classes, 2, 3))
    if style == "target":
        colors = np.abs(colors) * np.array([0.3, 1.0, 0.6])
    colors /= np.linalg.norm(colors, axis=2, keepdims=True)
    return theta, freq, colors


def generate_domain(n_classes, per_class, rng, shape=(3, 16, 16), style="source", shift=0.0, noise=None):
    if style not in STYLES:
        raise ValueError(f"style must be one of {STYLES}")
    c, h, w = shape
    if c != 3:
        raise ValueError("toy images have 3 channels")
    theta, freq, colors = _class_templates(n_classes, rng, style)
    noise = (0.25 if style == "source" else 0.35) if noise is None else noise
    contrast = 1.0 if style == "source" else 0.7
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    n = n_classes * per_class
    x = np.empty((n, c, h, w), dtype=np.float32)
    y = np.repeat(np.arange(n_classes), per_class)
    for i, k in enumerate(y):
        img = np.zeros((c, h, w))
        for g in range(2):
            th = theta[k, g] + rng.normal(0, 0.08)
            f = freq[k, g] * (1 + rng.normal(0, 0.05))
            phase = rng.uniform(0, 2 * np.pi)
            wave = np.sin(2 * np.pi * f * (xx * np.cos(th) + yy * np.sin(th)) + phase)
            if style == "target":
                wave = np.sign(wave)
            amp = rng.uniform(0.7, 1.3)
            img += amp * colors[k, g][:, None, None] * wave[None]
        if rng.random() < 0.5:
            img = img[:, :, ::-1]  # classes are mirror-invariant, like natural images
        img *= contrast
        img += rng.normal(0, 0.3, size=(c, 1, 1))
        img += rng.normal(0, noise, size=img.shape)
        x[i] = img + shift
    return Dataset(x, y, n_classes)


def generate_toy_pair(seed, n_source_classes=64, n_target_classes=20, per_class=30,
                      shape=(3, 16, 16), shift=0.5):
    """Source (meta-train) and shifted target (meta-test) datasets from one seed."""
    src = generate_domain(n_source_classes, per_class, stream(seed, "data", 0), shape, "source", 0.0)
    tgt = generate_domain(n_target_classes, per_class, stream(seed, "data", 1), shape, "target", shift)
    return src, tgt


_HEAD = struct.Struct("<4sIIII")


def dumps(ds):
    x = np.ascontiguousarray(ds.x, dtype="<f4")
    y = np.asarray(ds.y)
    if y.size and (y.min() < 0 or y.max() >= ds.n_classes):
        raise StructuralError("labels must lie in [0, class count)")
    dims = x.shape[1:]
    return (_HEAD.pack(MAGIC, VERSION, len(y), ds.n_classes, len(dims))
            + struct.pack(f"<{len(dims)}I", *dims)
            + y.astype("<u4").tobytes() + x.tobytes())


def loads(data):
    if len(data) < _HEAD.size:
        raise StructuralError("TTDS file shorter than its header")
    magic, version, count, n_classes, ndims = _HEAD.unpack_from(data)
    if magic != MAGIC:
        raise StructuralError(f"bad TTDS magic {magic!r}")
    if version != VERSION:
        raise StructuralError(f"TTDS version {version}, expected {VERSION}")
    off = _HEAD.size
    dims = struct.unpack_from(f"<{ndims}I", data, off)
    off += 4 * ndims
    labels = np.frombuffer(data, dtype="<u4", count=count, offset=off).astype(np.int64)
    off += 4 * count
    n_vals = count * int(np.prod(dims))
    if len(data) - off != 4 * n_vals:
        raise StructuralError(f"TTDS sample blob is {len(data) - off} bytes, header implies {4 * n_vals}")
    x = np.frombuffer(data, dtype="<f4", count=n_vals, offset=off).astype(np.float32).reshape((count,) + dims)
    if count and labels.max() >= n_classes:
        raise StructuralError("TTDS label exceeds class count")
    return Dataset(x, labels, n_classes)


def save_dataset(ds, path):
    with open(path, "wb") as fh:
        fh.write(dumps(ds))


def load_dataset(path):
    with open(path, "rb") as fh:
        return loads(fh.read())
