"""Checkpoint container.

Layout::

    b"FSCKPT1\\n"                       8-byte magic
    uint64 little-endian               header length in bytes
    header                             UTF-8 JSON, sorted keys
    payload                            tensor blocks, little-endian, in header order

The header holds ``spec`` (the ArchitectureSpec as a dict), ``meta`` (free
form) and ``tensors``: ``[{"name", "dtype", "shape", "offset", "nbytes"}]``
with offsets relative to the payload start.
"""

from __future__ import annotations

import json
import math
import struct
from pathlib import Path

import numpy as np

from ..errors import CheckpointError
from ..model import ArchitectureSpec, Network, build

MAGIC = b"FSCKPT1\n"
DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
CODES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}


def save_checkpoint(net: Network, path, meta=None) -> Path:
    tensors = []
    blocks = []
    offset = 0
    for name, p in net.registry.items():
        code = CODES[p.value.dtype]
        raw = np.ascontiguousarray(p.value, dtype=DTYPES[code]).tobytes()
        tensors.append({"name": name, "dtype": code, "shape": list(p.value.shape),
                        "offset": offset, "nbytes": len(raw)})
        blocks.append(raw)
        offset += len(raw)
    header = json.dumps({"spec": net.spec.to_dict(), "meta": meta or {}, "tensors": tensors},
                        sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in blocks:
            fh.write(raw)
    return path


def read_checkpoint(path):
    """Return ``(header, {name: array})`` after validating the container."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    if data[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    pos = len(MAGIC)
    if len(data) < pos + 8:
        raise CheckpointError(f"{path}: truncated header length")
    (hlen,) = struct.unpack("<Q", data[pos:pos + 8])
    pos += 8
    try:
        header = json.loads(data[pos:pos + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    payload = data[pos + hlen:]
    tensors = {}
    end = 0
    for t in header.get("tensors", []):
        dtype = DTYPES.get(t.get("dtype"))
        if dtype is None:
            raise CheckpointError(f"{path}: tensor {t.get('name')!r} has unknown dtype {t.get('dtype')!r}")
        expected = math.prod(t["shape"]) * dtype.itemsize
        if t["nbytes"] != expected:
            raise CheckpointError(f"{path}: tensor {t['name']!r} length {t['nbytes']} bytes does not "
                                  f"match shape {t['shape']} ({expected} bytes)")
        if t["offset"] != end or t["offset"] + t["nbytes"] > len(payload):
            raise CheckpointError(f"{path}: tensor {t['name']!r} block out of bounds")
        block = payload[t["offset"]:t["offset"] + t["nbytes"]]
        tensors[t["name"]] = np.frombuffer(block, dtype=dtype).reshape(t["shape"]).astype(
            dtype.newbyteorder("="))
        end = t["offset"] + t["nbytes"]
    if end != len(payload):
        raise CheckpointError(f"{path}: payload has {len(payload) - end} trailing bytes")
    return header, tensors


def _layer_signature(net: Network):
    sig = []
    for layer in net.layers():
        shapes = tuple((p.name, p.value.shape) for p in layer.parameters())
        sig.append((layer.name, layer.kind, getattr(layer, "function", None),
                    getattr(layer, "rate", None), shapes))
    return sig


def load_checkpoint(path, spec: ArchitectureSpec | None = None) -> Network:
    """Rebuild the saved network.

    If ``spec`` is given, the file must describe that architecture; the
    first layer that differs is named in the raised :class:`CheckpointError`.
    """
    header, tensors = read_checkpoint(path)
    try:
        saved_spec = ArchitectureSpec.from_dict(header["spec"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: invalid architecture spec ({exc})") from None
    dtype = next(iter(tensors.values())).dtype if tensors else np.float32
    net = build(saved_spec, dtype=dtype)
    if spec is not None and spec != saved_spec:
        expected = build(spec, dtype=dtype)
        want, have = _layer_signature(expected), _layer_signature(net)
        for w, h in zip(want, have):
            if w != h:
                raise CheckpointError(
                    f"{path}: architecture mismatch at layer {w[0]!r} "
                    f"(expected {w[1]} {w[4]}, checkpoint has {h[0]!r} {h[1]} {h[4]})")
        if len(want) != len(have):
            name = (want if len(want) > len(have) else have)[min(len(want), len(have))][0]
            raise CheckpointError(f"{path}: architecture mismatch at layer {name!r} (layer count differs)")
        raise CheckpointError(f"{path}: architecture spec differs from the requested one "
                              f"({saved_spec.variant} vs {spec.variant})")
    names = list(net.registry)
    if list(tensors) != names:
        for i, name in enumerate(names):
            if i >= len(tensors) or list(tensors)[i] != name:
                raise CheckpointError(f"{path}: tensor {name!r} missing or out of order")
        raise CheckpointError(f"{path}: unexpected extra tensors")
    for name, p in net.registry.items():
        if tensors[name].shape != p.value.shape:
            raise CheckpointError(f"{path}: tensor {name!r} has shape {tensors[name].shape}, "
                                  f"expected {p.value.shape}")
        p.value[...] = tensors[name]
    net.meta = header.get("meta", {})
    return net
