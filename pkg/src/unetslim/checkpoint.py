"""ASDM1 binary checkpoint container.

Layout (all integers little-endian)::

    b"ASDM1"                      magic, 5 bytes
    u32   version                 currently 1
    u64   header_len
    bytes header                  UTF-8 JSON: {"spec", "freeze", "provenance", "meta"}
    u32   n_tensors
    repeated n_tensors times:
        u16   name_len
        bytes name                UTF-8
        2s    dtype tag           b"f8" (float64) or b"i8" (int64)
        u8    ndim
        u64   dims[ndim]
        u64   payload_len         == 8 * prod(dims)
        bytes payload             little-endian, C order
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .unet import UNetModel, UNetSpec, build_unet

MAGIC = b"ASDM1"
VERSION = 1
DTYPES = {b"f8": np.dtype("<f8"), b"i8": np.dtype("<i8")}
TAGS = {np.dtype("float64"): b"f8", np.dtype("int64"): b"i8"}


class CheckpointError(ValueError):
    pass


class UnsupportedFormatError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    def __init__(self, what: str, offset: int, expected: int, actual: int):
        super().__init__(
            f"truncated checkpoint: {what} at offset {offset} needs {expected} bytes, only {actual} available"
        )
        self.offset, self.expected, self.actual = offset, expected, actual


@dataclass
class Checkpoint:
    spec: dict | None
    tensors: dict[str, np.ndarray]
    freeze: dict[str, bool] = field(default_factory=dict)
    provenance: dict[str, str] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def encode(ckpt: Checkpoint) -> bytes:
    header = json.dumps(
        {"spec": ckpt.spec, "freeze": ckpt.freeze, "provenance": ckpt.provenance, "meta": ckpt.meta},
        sort_keys=True,
    ).encode()
    out = [MAGIC, struct.pack("<IQ", VERSION, len(header)), header, struct.pack("<I", len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr)
        tag = TAGS.get(arr.dtype)
        if tag is None:
            raise CheckpointError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        raw = name.encode()
        payload = np.ascontiguousarray(arr, dtype=DTYPES[tag]).tobytes()
        out.append(struct.pack("<H", len(raw)) + raw + tag + struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(struct.pack("<Q", len(payload)) + payload)
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int, what: str) -> bytes:
        have = len(self.buf) - self.pos
        if have < n:
            raise TruncatedError(what, self.pos, n, have)
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    magic = buf[: len(MAGIC)]
    if magic != MAGIC:
        raise UnsupportedFormatError(f"bad magic {magic!r}; expected {MAGIC!r}")
    r.pos = len(MAGIC)
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise UnsupportedFormatError(f"unsupported format version {version}; this reader handles {VERSION}")
    (hlen,) = r.unpack("<Q", "header length")
    header = json.loads(r.take(hlen, "header").decode())
    (count,) = r.unpack("<I", "tensor count")
    tensors = {}
    for i in range(count):
        (nlen,) = r.unpack("<H", f"tensor {i} name length")
        name = r.take(nlen, f"tensor {i} name").decode()
        if name in tensors:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        tag = r.take(2, f"tensor {name!r} dtype")
        if tag not in DTYPES:
            raise UnsupportedFormatError(f"tensor {name!r}: unknown dtype tag {tag!r}")
        (ndim,) = r.unpack("<B", f"tensor {name!r} rank")
        dims = r.unpack(f"<{ndim}Q", f"tensor {name!r} dims")
        (plen,) = r.unpack("<Q", f"tensor {name!r} payload length")
        want = 8 * int(np.prod(dims, dtype=np.int64))
        if plen != want:
            raise CheckpointError(f"tensor {name!r}: payload length {plen} does not match shape {dims} ({want} bytes)")
        data = r.take(plen, f"tensor {name!r} payload")
        tensors[name] = np.frombuffer(data, dtype=DTYPES[tag]).reshape(dims).astype(DTYPES[tag].newbyteorder("="))
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after offset {r.pos}")
    return Checkpoint(header["spec"], tensors, header["freeze"], header["provenance"], header["meta"])


def save(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(encode(ckpt))


def load(path) -> Checkpoint:
    return decode(Path(path).read_bytes())


def from_model(model: UNetModel, freeze: dict[str, bool] | None = None, meta: dict | None = None) -> Checkpoint:
    return Checkpoint(
        model.spec.to_dict(),
        {n: p.data.copy() for n, p in model.named_parameters()},
        dict(freeze or {}),
        dict(getattr(model, "provenance", None) or {}),
        dict(meta or {}),
    )


def to_model(ckpt: Checkpoint) -> UNetModel:
    if ckpt.spec is None:
        raise CheckpointError("checkpoint carries no model spec")
    model = build_unet(UNetSpec.from_dict(ckpt.spec), seed=0)
    params = dict(model.named_parameters())
    missing = sorted(set(params) - set(ckpt.tensors))
    extra = sorted(set(ckpt.tensors) - set(params))
    if missing or extra:
        raise CheckpointError(f"tensor table does not match spec: missing {missing[:5]}, unexpected {extra[:5]}")
    for n, p in params.items():
        if ckpt.tensors[n].shape != p.data.shape:
            raise CheckpointError(f"tensor {n!r}: shape {ckpt.tensors[n].shape} but spec needs {p.data.shape}")
        p.data = ckpt.tensors[n].copy()
    if ckpt.provenance:
        model.provenance = dict(ckpt.provenance)
    return model


def save_model(path, model: UNetModel, freeze=None, meta=None) -> None:
    save(path, from_model(model, freeze, meta))


def load_model(path) -> tuple[UNetModel, Checkpoint]:
    ckpt = load(path)
    return to_model(ckpt), ckpt
