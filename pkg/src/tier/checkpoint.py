"""Binary checkpoint container.

Layout (integers little-endian)::

    magic     8 bytes  b"TIERCKPT"
    version   u32
    header    u32 length, UTF-8 JSON (config, dims, epoch, history, optimizer
              step), u32 CRC32 of the JSON bytes
    params    tensor table
    optimizer tensor table (Adam first/second moments, "m.<name>"/"v.<name>")

A tensor table is a u32 entry count followed by entries of the form
``u16 name length | name | u8 dtype tag (1 = f64) | u8 ndim | u32[ndim] shape |
f64 payload | u32 CRC32 of the preceding entry bytes``.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoders import ModelDims, ModelParams, param_shapes
from .errors import IntegrityError, VersionError

MAGIC = b"TIERCKPT"
FORMAT_VERSION = 1
DTYPE_F64 = 1


@dataclass
class AdamState:
    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def zeros(cls, params: ModelParams) -> "AdamState":
        named = params.named()
        return cls(0, {k: np.zeros_like(a) for k, a in named.items()},
                   {k: np.zeros_like(a) for k, a in named.items()})

    def copy(self) -> "AdamState":
        return AdamState(self.step, {k: a.copy() for k, a in self.m.items()},
                         {k: a.copy() for k, a in self.v.items()})


@dataclass
class Checkpoint:
    params: ModelParams
    optimizer: AdamState
    config: dict  # TrainConfig.to_dict()
    epoch: int  # completed epochs
    history: list[dict] = field(default_factory=list)
    version: int = FORMAT_VERSION

    @property
    def dims(self) -> ModelDims:
        return self.params.dims


def _pack_table(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        entry = b"".join((
            struct.pack("<H", len(raw)), raw,
            struct.pack("<BB", DTYPE_F64, arr.ndim),
            struct.pack(f"<{arr.ndim}I", *arr.shape),
            np.ascontiguousarray(arr).tobytes(),
        ))
        parts.append(entry + struct.pack("<I", zlib.crc32(entry)))
    return b"".join(parts)


def _unpack_table(data: bytes, off: int, what: str) -> tuple[dict[str, np.ndarray], int]:
    def need(n, index=None):
        if off + n > len(data):
            where = "" if index is None else f" in entry {index}"
            raise IntegrityError(f"truncated {what} table{where}", record_index=index)

    need(4)
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    out = {}
    for i in range(count):
        start = off
        need(2, i)
        (n_name,) = struct.unpack_from("<H", data, off)
        off += 2
        need(n_name + 2, i)
        name = data[off:off + n_name].decode("utf-8", errors="replace")
        off += n_name
        tag, ndim = struct.unpack_from("<BB", data, off)
        off += 2
        need(4 * ndim, i)
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        n_bytes = 8 * int(np.prod(shape, dtype=np.int64))
        need(n_bytes + 4, i)
        payload = data[off:off + n_bytes]
        off += n_bytes
        (crc,) = struct.unpack_from("<I", data, off)
        if zlib.crc32(data[start:off]) != crc:
            raise IntegrityError(f"checksum mismatch in {what} entry {i} ({name!r})", record_index=i)
        off += 4
        if tag != DTYPE_F64:
            raise IntegrityError(f"unknown dtype tag {tag} in {what} entry {i}", record_index=i)
        out[name] = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)
    return out, off


def checkpoint_to_bytes(ckpt: Checkpoint) -> bytes:
    header = {
        "config": ckpt.config,
        "dims": ckpt.dims.to_dict(),
        "epoch": ckpt.epoch,
        "history": ckpt.history,
        "optimizer_step": ckpt.optimizer.step,
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    opt = {f"m.{k}": a for k, a in ckpt.optimizer.m.items()}
    opt.update({f"v.{k}": a for k, a in ckpt.optimizer.v.items()})
    return b"".join((
        MAGIC, struct.pack("<I", ckpt.version), struct.pack("<I", len(raw)), raw,
        struct.pack("<I", zlib.crc32(raw)), _pack_table(ckpt.params.named()), _pack_table(opt),
    ))


def checkpoint_from_bytes(data: bytes, expected_dims: ModelDims | None = None) -> Checkpoint:
    if len(data) < 16 or data[:8] != MAGIC:
        raise IntegrityError("not a checkpoint container (bad magic)")
    (version,) = struct.unpack_from("<I", data, 8)
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported checkpoint format version {version} (expected {FORMAT_VERSION})")
    (n_json,) = struct.unpack_from("<I", data, 12)
    if 16 + n_json + 4 > len(data):
        raise IntegrityError("truncated checkpoint header")
    raw = data[16:16 + n_json]
    (crc,) = struct.unpack_from("<I", data, 16 + n_json)
    if zlib.crc32(raw) != crc:
        raise IntegrityError("checkpoint header checksum mismatch")
    header = json.loads(raw.decode("utf-8"))
    dims = ModelDims.from_dict(header["dims"])
    if expected_dims is not None and dims != expected_dims:
        raise IntegrityError(f"checkpoint dims {dims} do not match expected {expected_dims}")
    off = 16 + n_json + 4
    params_named, off = _unpack_table(data, off, "parameter")
    opt_named, off = _unpack_table(data, off, "optimizer")
    if off != len(data):
        raise IntegrityError("trailing bytes after checkpoint tables")

    shapes = param_shapes(dims)
    if set(params_named) != set(shapes):
        raise IntegrityError("checkpoint parameter names do not match the model")
    for name, shape in shapes.items():
        for table, key in ((params_named, name), (opt_named, f"m.{name}"), (opt_named, f"v.{name}")):
            if key not in table or table[key].shape != shape:
                raise IntegrityError(f"tensor {key!r} missing or has the wrong shape for dims {dims}")
    params = ModelParams.from_named({k: params_named[k] for k in shapes}, dims)
    optimizer = AdamState(
        header["optimizer_step"],
        {k: opt_named[f"m.{k}"] for k in shapes},
        {k: opt_named[f"v.{k}"] for k in shapes},
    )
    return Checkpoint(params, optimizer, header["config"], header["epoch"], header["history"], version)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(checkpoint_to_bytes(ckpt))


def load_checkpoint(path, expected_dims: ModelDims | None = None) -> Checkpoint:
    return checkpoint_from_bytes(Path(path).read_bytes(), expected_dims)
