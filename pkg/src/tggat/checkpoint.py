"""Binary checkpoint format.

Layout (all integers little-endian):

    b"TGGAT1"
    u64 header length, header bytes (canonical JSON: config, iteration, history, step)
    u64 parameter count, then one record per parameter
    u64 moment count, then one record per optimizer moment

A record is ``u32 name length, name (utf-8), u32 rank, rank x u64 dims,
prod(dims) x f64``. Values are stored verbatim, so a round trip is bit-exact.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import Config

MAGIC = b"TGGAT1"


class CheckpointError(ValueError):
    pass


class CompatibilityError(CheckpointError):
    """Checkpoint does not fit the model or config it is loaded into."""


@dataclass
class Checkpoint:
    config: Config
    iteration: int
    params: dict                                  # name -> float64 array
    moments: dict = field(default_factory=dict)   # "m.<name>" / "v.<name>" -> array
    step: int = 0                                 # optimizer step count
    history: list = field(default_factory=list)   # metric records

    def header(self) -> dict:
        return {"config": self.config.to_dict(), "iteration": self.iteration,
                "history": self.history, "step": self.step}


def _write_records(buf: bytearray, records: dict):
    buf += struct.pack("<Q", len(records))
    for name in sorted(records):
        arr = np.asarray(records[name], dtype="<f8")
        raw = name.encode("utf-8")
        buf += struct.pack("<I", len(raw)) + raw
        buf += struct.pack("<I", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        buf += arr.tobytes()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def records(self) -> dict:
        (count,) = self.unpack("<Q")
        out = {}
        for _ in range(count):
            (n,) = self.unpack("<I")
            name = self.take(n).decode("utf-8")
            (rank,) = self.unpack("<I")
            dims = self.unpack(f"<{rank}Q") if rank else ()
            size = int(np.prod(dims)) if rank else 1
            out[name] = np.frombuffer(self.take(8 * size), dtype="<f8").astype(np.float64).reshape(dims)
        return out


def to_bytes(ckpt: Checkpoint) -> bytes:
    buf = bytearray(MAGIC)
    header = json.dumps(ckpt.header(), sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf += struct.pack("<Q", len(header)) + header
    _write_records(buf, ckpt.params)
    _write_records(buf, ckpt.moments)
    return bytes(buf)


def from_bytes(data: bytes) -> Checkpoint:
    if not data.startswith(MAGIC):
        raise CheckpointError("not a checkpoint (bad magic)")
    r = _Reader(data)
    r.take(len(MAGIC))
    (n,) = r.unpack("<Q")
    try:
        header = json.loads(r.take(n).decode("utf-8"))
        cfg = Config.from_dict(header["config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"bad checkpoint header: {exc}") from None
    params = r.records()
    moments = r.records()
    if r.pos != len(data):
        raise CheckpointError("trailing bytes after checkpoint")
    return Checkpoint(cfg, int(header["iteration"]), params, moments, int(header.get("step", 0)),
                      list(header.get("history", [])))


def save_checkpoint(ckpt: Checkpoint, path) -> str:
    """Write ``ckpt``; returns the sha256 of the file contents."""
    data = to_bytes(ckpt)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())


def snapshot(model, cfg: Config, iteration: int, optimizer=None, history=None) -> Checkpoint:
    params = {name: p.values.copy() for name, p in model.named_parameters()}
    moments, step = {}, 0
    if optimizer is not None:
        moments, step = optimizer.state_dict()
    return Checkpoint(cfg, iteration, params, moments, step, list(history or []))


def restore_params(model, ckpt: Checkpoint):
    """Copy checkpoint values into ``model``; names and shapes must match exactly."""
    params = model.parameters()
    if set(params) != set(ckpt.params):
        missing = sorted(set(params) ^ set(ckpt.params))[:5]
        raise CompatibilityError(f"parameter names differ (e.g. {missing})")
    for name, p in params.items():
        value = ckpt.params[name]
        if value.shape != p.values.shape:
            raise CompatibilityError(f"{name}: shape {value.shape} vs model {p.values.shape}")
        p.values[...] = value
    return model
