"""Self-describing checkpoint files.

Layout::

    layerprune-checkpoint
    version=1
    spec.<field>=<value>          one line per NetworkSpec field
    removed=<Stage.index>,...
    params=<count>
    end
    <blocks>

Each block, in sorted parameter-name order, is
``u32 name_len | name utf-8 | u32 ndim | u32 dims[ndim] | u64 n | f64 data[n]``,
all little-endian.
"""

from __future__ import annotations

import dataclasses
import io
import os
import struct

import numpy as np

from .toynet import LayerError, Network, NetworkSpec, Stage, build

MAGIC = "layerprune-checkpoint"
FORMAT_VERSION = 1

__all__ = ["CheckpointError", "save", "load", "FORMAT_VERSION"]


class CheckpointError(ValueError):
    """Malformed, truncated or incompatible checkpoint file."""


def _fmt(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def _header(net: Network) -> str:
    lines = [MAGIC, f"version={FORMAT_VERSION}"]
    for f in dataclasses.fields(NetworkSpec):
        lines.append(f"spec.{f.name}={_fmt(getattr(net.spec, f.name))}")
    removed = sorted(net.removed)
    lines.append("removed=" + ",".join(l.key for l in removed))
    lines.append(f"params={len(net.named_parameters())}")
    lines.append("end")
    return "\n".join(lines) + "\n"


def save(net: Network, path) -> None:
    buf = io.BytesIO()
    buf.write(_header(net).encode("utf-8"))
    for name, p in sorted(net.named_parameters().items()):
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", p.ndim))
        buf.write(struct.pack(f"<{p.ndim}I", *p.shape))
        buf.write(struct.pack("<Q", p.size))
        buf.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(buf.getvalue())
    os.replace(tmp, path)


def _parse_spec(fields: dict[str, str]) -> NetworkSpec:
    kwargs = {}
    for f in dataclasses.fields(NetworkSpec):
        if f.name not in fields:
            raise CheckpointError(f"header lacks spec.{f.name}")
        raw = fields.pop(f.name)
        try:
            if f.name in ("widths", "dn_residual", "dn_mixer", "up_residual", "up_mixer"):
                kwargs[f.name] = tuple(int(v) for v in raw.split(",")) if raw else ()
            else:
                kwargs[f.name] = int(raw)
        except ValueError:
            raise CheckpointError(f"bad value for spec.{f.name}: {raw!r}") from None
    if fields:
        raise CheckpointError(f"unknown spec fields in header: {sorted(fields)}")
    try:
        return NetworkSpec(**kwargs)
    except ValueError as exc:
        raise CheckpointError(f"invalid network spec in header: {exc}") from None


class _Reader:
    def __init__(self, data: bytes, pos: int):
        self.data, self.pos = data, pos

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out


def load(path) -> Network:
    with open(path, "rb") as fh:
        data = fh.read()
    lines = []
    pos = 0
    while True:
        nl = data.find(b"\n", pos)
        if nl < 0:
            raise CheckpointError("truncated checkpoint header")
        try:
            line = data[pos:nl].decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError("corrupted checkpoint header") from None
        pos = nl + 1
        if not lines and line != MAGIC:
            raise CheckpointError(f"not a checkpoint file (expected {MAGIC!r} header)")
        lines.append(line)
        if line == "end":
            break
        if len(lines) > 256:
            raise CheckpointError("corrupted checkpoint header: no end marker")
    kv = {}
    for line in lines[1:-1]:
        key, sep, value = line.partition("=")
        if not sep:
            raise CheckpointError(f"corrupted header line {line!r}")
        kv[key] = value
    version = kv.pop("version", None)
    if version != str(FORMAT_VERSION):
        raise CheckpointError(f"unsupported checkpoint version {version!r}, expected {FORMAT_VERSION}")
    spec = _parse_spec({k[5:]: v for k, v in kv.items() if k.startswith("spec.")})
    try:
        removed_keys = [k for k in kv.get("removed", "").split(",") if k]
        n_params = int(kv["params"])
    except (KeyError, ValueError):
        raise CheckpointError("header lacks a valid params/removed entry") from None

    net = build(spec)
    by_key = {l.key: l for l in net.layer_ids}
    try:
        removed = []
        for key in removed_keys:
            stage, _, idx = key.rpartition(".")
            Stage.parse(stage)
            removed.append(by_key[key])
        net = net.remove_layers(removed)
    except (KeyError, LayerError):
        raise CheckpointError(f"invalid removed-layer set {removed_keys}") from None

    params = net.named_parameters()
    if n_params != len(params):
        raise CheckpointError(f"header declares {n_params} parameters, architecture has {len(params)}")
    reader = _Reader(data, pos)
    seen = set()
    for _ in range(n_params):
        (name_len,) = struct.unpack("<I", reader.take(4, "name length"))
        try:
            name = reader.take(name_len, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError("corrupted parameter name") from None
        (ndim,) = struct.unpack("<I", reader.take(4, f"{name} rank"))
        shape = struct.unpack(f"<{ndim}I", reader.take(4 * ndim, f"{name} shape"))
        (count,) = struct.unpack("<Q", reader.take(8, f"{name} size"))
        if name not in params or name in seen:
            raise CheckpointError(f"unexpected parameter {name!r}")
        target = params[name]
        if tuple(shape) != target.shape or count != target.size:
            raise CheckpointError(f"parameter {name!r} has shape {shape}, architecture expects {target.shape}")
        arr = np.frombuffer(reader.take(8 * count, f"{name} data"), dtype="<f8").reshape(shape)
        target.data = arr.astype(np.float64, copy=True)
        seen.add(name)
    if reader.pos != len(data):
        raise CheckpointError("trailing bytes after last parameter block")
    return net
