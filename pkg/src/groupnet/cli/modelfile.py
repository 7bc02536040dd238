"""Binary model file for lowered networks.

Layout (all integers little-endian)::

    b"GNET"                       magic
    u32 version
    u32 n, n bytes                JSON header: architecture, quantisation, meta
    u32 record count
    records                       see below
    u64 FNV-1a checksum of every preceding byte

Each record is ``u8 kind``, ``u16`` name length + UTF-8 name, ``u8`` rank +
``u32`` dims, ``u32`` attribute length + JSON attributes, then the payload:

* ``float`` / ``linear``: f64 weights, then a flag byte and f64 scale
  (per output channel) if present, then f64 bias.
* ``binary``: u64 word count, u64 packed sign words (one padded row per
  output filter), f64 scale and f64 bias per output channel.
* ``vector``: f64 values.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from ..bitcore import BitTensor
from ..errors import ModelFormatError
from ..structnet import ArchConfig, PackedLayer, PackedModel

MAGIC = b"GNET"
VERSION = 1
KIND_TAGS = {"float": 0, "binary": 1, "vector": 2, "linear": 3}
_KIND_OF = {v: k for k, v in KIND_TAGS.items()}
FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK = (1 << 64) - 1


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for b in data:
        h = ((h ^ b) * FNV_PRIME) & _MASK
    return h


def _json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def _f64(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def _write_record(buf, layer: PackedLayer):
    name = layer.name.encode()
    buf.write(struct.pack("<BH", KIND_TAGS[layer.kind], len(name)))
    buf.write(name)
    buf.write(struct.pack("<B", len(layer.shape)))
    buf.write(struct.pack(f"<{len(layer.shape)}I", *layer.shape))
    attrs = _json(layer.attrs())
    buf.write(struct.pack("<I", len(attrs)))
    buf.write(attrs)
    if layer.kind in ("float", "linear"):
        buf.write(_f64(layer.weight))
        has_scale = layer.scale is not None
        buf.write(struct.pack("<B", int(has_scale)))
        if has_scale:
            buf.write(_f64(layer.scale))
        buf.write(_f64(layer.bias))
    elif layer.kind == "binary":
        words = np.ascontiguousarray(layer.bits.words, dtype="<u8")
        buf.write(struct.pack("<Q", words.size))
        buf.write(words.tobytes())
        buf.write(_f64(layer.scale))
        buf.write(_f64(layer.bias))
    else:
        buf.write(_f64(layer.bias))


def dumps(model: PackedModel) -> bytes:
    """Serialise a packed model to bytes (deterministic)."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    header = _json({"arch": model.arch.to_dict(), "meta": model.meta})
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    buf.write(struct.pack("<I", len(model.layers)))
    for layer in model.layers.values():
        _write_record(buf, layer)
    body = buf.getvalue()
    return body + struct.pack("<Q", fnv1a64(body))


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise ModelFormatError(f"truncated model file at offset {self.pos}: need {n} bytes for {what}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def f64(self, count, what):
        return np.frombuffer(self.take(8 * count, what), dtype="<f8").astype(np.float64)


def _read_record(r: _Reader) -> PackedLayer:
    tag, nlen = r.unpack("<BH", "record tag")
    if tag not in _KIND_OF:
        raise ModelFormatError(f"unknown record kind {tag} at offset {r.pos - 3}")
    kind = _KIND_OF[tag]
    name = r.take(nlen, "record name").decode()
    (rank,) = r.unpack("<B", "rank")
    shape = tuple(r.unpack(f"<{rank}I", "shape")) if rank else ()
    (alen,) = r.unpack("<I", "attribute length")
    attrs = json.loads(r.take(alen, "attributes"))
    size = int(np.prod(shape, dtype=np.int64)) if shape else 1
    fields = dict(name=name, kind=kind, shape=shape, **attrs)
    if kind in ("float", "linear"):
        fields["weight"] = r.f64(size, f"{name} weights").reshape(shape)
        (has_scale,) = r.unpack("<B", "scale flag")
        if has_scale:
            fields["scale"] = r.f64(shape[0], f"{name} scale")
        fields["bias"] = r.f64(shape[0], f"{name} bias")
    elif kind == "binary":
        (nwords,) = r.unpack("<Q", "word count")
        words = np.frombuffer(r.take(8 * nwords, f"{name} words"), dtype="<u8").astype(np.uint64)
        try:
            fields["bits"] = BitTensor(shape, words, "rows")
        except ValueError as exc:
            raise ModelFormatError(f"{name}: {exc}") from exc
        fields["scale"] = r.f64(shape[0], f"{name} scale")
        fields["bias"] = r.f64(shape[0], f"{name} bias")
    else:
        fields["bias"] = r.f64(size, f"{name} values").reshape(shape)
    return PackedLayer(**fields)


def loads(data: bytes) -> PackedModel:
    """Parse bytes produced by :func:`dumps`, verifying magic, version and checksum."""
    data = bytes(data)
    if len(data) < 16:
        raise ModelFormatError(f"file too short ({len(data)} bytes) to be a model file")
    if data[:4] != MAGIC:
        raise ModelFormatError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise ModelFormatError(f"model file version {version} is not supported by this reader (version {VERSION})")
    body, (stored,) = data[:-8], struct.unpack("<Q", data[-8:])
    actual = fnv1a64(body)
    if stored != actual:
        raise ModelFormatError(f"checksum mismatch: file says {stored:016x}, contents hash to {actual:016x}")
    r = _Reader(body)
    r.pos = 8
    (hlen,) = r.unpack("<I", "header length")
    try:
        header = json.loads(r.take(hlen, "header"))
        arch = ArchConfig.from_dict(header["arch"])
    except (ValueError, KeyError, TypeError) as exc:
        raise ModelFormatError(f"unreadable header: {exc}") from exc
    (count,) = r.unpack("<I", "record count")
    layers = {}
    for _ in range(count):
        layer = _read_record(r)
        layers[layer.name] = layer
    if r.pos != len(body):
        raise ModelFormatError(f"{len(body) - r.pos} unexpected bytes after the last record at offset {r.pos}")
    return PackedModel(arch, layers, header.get("meta", {}))


def save(model: PackedModel, path):
    data = dumps(model)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(data)
    return data


def load(path) -> PackedModel:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise ModelFormatError(f"cannot read model file {path}: {exc.strerror}") from exc
    return loads(data)
