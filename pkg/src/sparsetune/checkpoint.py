"""TTCK checkpoint files.

Layout::

    b"TTCK" | version u32 LE | manifest length u32 LE | manifest (UTF-8 JSON) | blobs

The manifest holds the model spec and one record per tensor with its layer, kind,
shape, dtype and absolute byte offset. Blobs are raw little-endian scalars.
"""

import json
import struct

import numpy as np

from .arch import ModelSpec, ParamStore
from .errors import (CheckpointError, CheckpointShapeError, CheckpointTruncatedError,
                     CheckpointVersionError)

MAGIC = b"TTCK"
VERSION = 1
_HEADER = struct.Struct("<4sII")
_DTYPES = {"float32": "<f4", "float64": "<f8"}


def _manifest_bytes(spec, records, extra):
    return json.dumps({"spec": spec.to_dict(), "tensors": records, "extra": extra},
                      sort_keys=True, separators=(",", ":")).encode("utf-8")


def dumps(spec, params, extra=None):
    params.check(spec)
    extra = extra or {}
    blobs, records = [], []
    for layer in spec.layers:
        if not layer.has_weights:
            continue
        for kind in ("weight", "bias"):
            arr = params[layer.name][kind]
            dtype = np.dtype(arr.dtype).name
            if dtype not in _DTYPES:
                raise CheckpointError(f"unsupported dtype {dtype} for {layer.name}/{kind}")
            blob = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
            records.append({"layer": layer.name, "kind": kind, "shape": list(arr.shape),
                            "dtype": dtype, "offset": 0, "nbytes": len(blob)})
            blobs.append(blob)
    # offsets are absolute, so the manifest length feeds back into them
    manifest = b""
    while True:
        pos = _HEADER.size + len(manifest)
        for rec, blob in zip(records, blobs):
            rec["offset"] = pos
            pos += len(blob)
        new = _manifest_bytes(spec, records, extra)
        if len(new) == len(manifest):
            manifest = new
            break
        manifest = new
    return _HEADER.pack(MAGIC, VERSION, len(manifest)) + manifest + b"".join(blobs)


def loads(data):
    if len(data) < _HEADER.size:
        raise CheckpointTruncatedError("file shorter than the TTCK header")
    magic, version, mlen = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, expected {VERSION}")
    end = _HEADER.size + mlen
    if len(data) < end:
        raise CheckpointTruncatedError("manifest truncated")
    try:
        manifest = json.loads(data[_HEADER.size:end].decode("utf-8"))
        spec = ModelSpec.from_dict(manifest["spec"])
    except (ValueError, KeyError) as exc:
        raise CheckpointError(f"unreadable manifest: {exc}") from exc
    tensors = {}
    for rec in manifest["tensors"]:
        layer, kind = rec["layer"], rec["kind"]
        start, nbytes = rec["offset"], rec["nbytes"]
        if start + nbytes > len(data):
            raise CheckpointTruncatedError(f"blob for layer {layer!r} ({kind}) is truncated", layer=layer)
        dtype = np.dtype(_DTYPES[rec["dtype"]])
        shape = tuple(rec["shape"])
        if int(np.prod(shape)) * dtype.itemsize != nbytes:
            raise CheckpointShapeError(f"layer {layer!r} ({kind}): shape {shape} disagrees with blob size")
        arr = np.frombuffer(data, dtype=dtype, count=nbytes // dtype.itemsize, offset=start)
        tensors.setdefault(layer, {})[kind] = arr.reshape(shape).astype(dtype.newbyteorder("="))
    params = ParamStore(tensors)
    try:
        params.check(spec)
    except Exception as exc:
        raise CheckpointShapeError(str(exc)) from exc
    return spec, params, manifest.get("extra", {})


def save_checkpoint(spec, params, path, extra=None):
    with open(path, "wb") as fh:
        fh.write(dumps(spec, params, extra))


def load_checkpoint(path):
    """Returns ``(spec, params)``."""
    with open(path, "rb") as fh:
        spec, params, _ = loads(fh.read())
    return spec, params


def read_manifest(path):
    with open(path, "rb") as fh:
        data = fh.read()
    _, _, mlen = _HEADER.unpack_from(data)
    return json.loads(data[_HEADER.size:_HEADER.size + mlen].decode("utf-8"))
