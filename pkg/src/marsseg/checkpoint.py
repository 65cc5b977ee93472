"""Binary checkpoint format.

Layout (all integers little-endian)::

    magic          8 bytes   b"MSEGCKPT"
    version        u32
    meta_len       u64       length of the JSON metadata blob
    meta           meta_len  UTF-8 JSON: architecture config, taxonomy, provenance
    n_tensors      u32
    directory      n_tensors entries:
                     name_len u16, name, dtype u8 (0 = float32), ndim u8,
                     dims u32 * ndim, offset u64, nbytes u64, crc32 u32
    header_crc     u32       CRC-32 of every byte above
    payload        raw float32 tensor data, offsets relative to payload start

Loading verifies every length, offset and checksum before returning, so a
damaged file never yields a partially populated checkpoint.
"""
from __future__ import annotations

import io
import json
import struct
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
import torch

from .data import taxonomy
from .model import ModelConfig, SegModel, build_model

MAGIC = b"MSEGCKPT"
FORMAT_VERSION = 1
DTYPE_F32 = 0


class CheckpointError(RuntimeError):
    pass


class ArchitectureMismatch(CheckpointError):
    pass


@dataclass
class Checkpoint:
    arch: dict
    tensors: "OrderedDict[str, np.ndarray]"
    provenance: dict = field(default_factory=dict)
    taxonomy: dict = field(default_factory=taxonomy)
    version: int = FORMAT_VERSION

    @classmethod
    def from_model(cls, model: SegModel, provenance: Optional[dict] = None) -> "Checkpoint":
        tensors = OrderedDict(
            (k, v.detach().to("cpu", torch.float32).numpy().copy()) for k, v in model.state_dict().items())
        return cls(model.cfg.to_dict(), tensors, dict(provenance or {}))

    @property
    def model_config(self) -> ModelConfig:
        return ModelConfig.from_dict(self.arch)

    def to_model(self) -> SegModel:
        model = build_model(self.model_config)
        self.load_into(model)
        return model

    def load_into(self, model: SegModel, prefixes: Optional[Iterable[str]] = None) -> None:
        """Copy tensors into ``model``; nothing is written unless every tensor matches.

        With ``prefixes`` only tensors whose names start with one of them are
        transferred (e.g. the encoder of a pretraining checkpoint).
        """
        target = model.state_dict()
        wanted = [k for k in target if prefixes is None or k.startswith(tuple(prefixes))]
        problems = []
        for k in wanted:
            if k not in self.tensors:
                problems.append(f"{k} (missing from checkpoint)")
            elif tuple(self.tensors[k].shape) != tuple(target[k].shape):
                problems.append(f"{k} (checkpoint {tuple(self.tensors[k].shape)} vs model {tuple(target[k].shape)})")
        if prefixes is None:
            problems += [f"{k} (not in model)" for k in self.tensors if k not in target]
        if problems:
            raise ArchitectureMismatch("tensor mismatch: " + "; ".join(problems))
        with torch.no_grad():
            for k in wanted:
                target[k].copy_(torch.from_numpy(self.tensors[k]))

    def equals(self, other: "Checkpoint") -> bool:
        if list(self.tensors) != list(other.tensors):
            return False
        return all(a.tobytes() == other.tensors[k].tobytes() for k, a in self.tensors.items())


def _meta(ckpt: Checkpoint) -> bytes:
    blob = {"arch": ckpt.arch, "taxonomy": ckpt.taxonomy, "provenance": ckpt.provenance}
    return json.dumps(blob, sort_keys=True).encode()


def save_checkpoint(ckpt: Checkpoint, path: Path | str) -> None:
    head = io.BytesIO()
    meta = _meta(ckpt)
    head.write(MAGIC)
    head.write(struct.pack("<IQ", FORMAT_VERSION, len(meta)))
    head.write(meta)
    head.write(struct.pack("<I", len(ckpt.tensors)))
    payload = io.BytesIO()
    for name, arr in ckpt.tensors.items():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        enc = name.encode()
        head.write(struct.pack("<H", len(enc)))
        head.write(enc)
        head.write(struct.pack("<BB", DTYPE_F32, arr.ndim))
        head.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        head.write(struct.pack("<QQI", payload.tell(), len(data), zlib.crc32(data)))
        payload.write(data)
    header = head.getvalue()
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(struct.pack("<I", zlib.crc32(header)))
        fh.write(payload.getvalue())
    tmp.replace(path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(
                f"truncated checkpoint: need {n} bytes for {what} at offset {self.pos}, file has {len(self.buf)}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_checkpoint(path: Path | str) -> Checkpoint:
    buf = Path(path).read_bytes()
    r = _Reader(buf)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointError(f"{path}: bad magic at offset 0, not a checkpoint file")
    version, meta_len = r.unpack("<IQ", "version/meta length")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version} unsupported (expected {FORMAT_VERSION})")
    meta_raw = r.take(meta_len, "metadata")
    (count,) = r.unpack("<I", "tensor count")
    entries = []
    for i in range(count):
        (nlen,) = r.unpack("<H", f"name length of tensor {i}")
        name = r.take(nlen, f"name of tensor {i}").decode()
        dtype, ndim = r.unpack("<BB", f"dtype of {name}")
        if dtype != DTYPE_F32:
            raise CheckpointError(f"{name}: unsupported dtype code {dtype} at offset {r.pos - 2}")
        shape = r.unpack(f"<{ndim}I", f"shape of {name}")
        offset, nbytes, crc = r.unpack("<QQI", f"directory entry of {name}")
        entries.append((name, shape, offset, nbytes, crc))
    header_end = r.pos
    (header_crc,) = r.unpack("<I", "header checksum")
    if zlib.crc32(buf[:header_end]) != header_crc:
        raise CheckpointError(f"{path}: header checksum mismatch (header spans bytes 0-{header_end})")
    try:
        meta = json.loads(meta_raw)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: unreadable metadata at offset 20: {exc}") from None

    base = r.pos
    tensors = OrderedDict()
    for name, shape, offset, nbytes, crc in entries:
        start = base + offset
        expected = 4 * int(np.prod(shape, dtype=np.int64))
        if nbytes != expected:
            raise CheckpointError(f"{name}: directory says {nbytes} bytes, shape {shape} needs {expected}")
        if start + nbytes > len(buf):
            raise CheckpointError(
                f"truncated checkpoint: tensor {name} spans bytes {start}-{start + nbytes}, file has {len(buf)}")
        data = buf[start:start + nbytes]
        if zlib.crc32(data) != crc:
            raise CheckpointError(f"{name}: payload checksum mismatch at offset {start}")
        tensors[name] = np.frombuffer(data, dtype="<f4").astype(np.float32).reshape(shape)
    return Checkpoint(meta["arch"], tensors, meta.get("provenance", {}), meta.get("taxonomy", taxonomy()), version)
