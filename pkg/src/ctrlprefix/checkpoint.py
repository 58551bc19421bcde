"""Self-describing binary checkpoints.

Layout (all integers little-endian)::

    b"CPFX" | u16 version | u32 header length | header (UTF-8 JSON, sorted keys)
    u32 record count
    per record: u16 name length | name | u8 frozen | u8 ndim | u64 dims... | fp64 payload
    32-byte SHA-256 of everything above

Saving the same model twice produces identical bytes.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Any

import numpy as np

from .guidance import AttributeSchema
from .model import ControlPrefixModel
from .prefix import PrefixConfig
from .tensor import Parameter
from .transformer import ModelConfig, Seq2SeqTransformer
from .utils import derive_rng
from .vocab import Vocab

MAGIC = b"CPFX"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _all_parameters(model: ControlPrefixModel) -> list[Parameter]:
    params = {p.name: p for p in model.frozen_parameters()}
    params.update((p.name, p) for p in model.trainable_parameters())
    return [params[k] for k in sorted(params)]


def to_bytes(model: ControlPrefixModel, seed: int = 0, metrics: list | None = None,
             extra: dict[str, Any] | None = None) -> bytes:
    header = {
        "model": model.config.to_dict(),
        "prefix": model.prefix_config.to_dict(),
        "schema": model.schema.to_dict(),
        "vocab": model.vocab.tokens,
        "special_tokens": model.special_tokens,
        "control_tokens": model.control_tokens is not None,
        "folded": model.bank.folded,
        "seed": int(seed),
        "metrics": list(metrics or []),
        "extra": dict(extra or {}),
    }
    hbytes = json.dumps(header, sort_keys=True, ensure_ascii=False).encode("utf-8")
    params = _all_parameters(model)
    parts = [MAGIC, struct.pack("<HI", VERSION, len(hbytes)), hbytes, struct.pack("<I", len(params))]
    for p in params:
        name = p.name.encode("utf-8")
        data = np.ascontiguousarray(p.data, dtype="<f8")
        parts.append(struct.pack("<H", len(name)) + name)
        parts.append(struct.pack("<BB", int(p.frozen), data.ndim))
        parts.append(struct.pack(f"<{data.ndim}Q", *data.shape))
        parts.append(data.tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def save(model: ControlPrefixModel, path: str | Path, seed: int = 0, metrics: list | None = None,
         extra: dict[str, Any] | None = None) -> None:
    Path(path).write_bytes(to_bytes(model, seed, metrics, extra))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_records(buf: bytes) -> tuple[dict, dict[str, tuple[bool, np.ndarray]]]:
    """Header dict and ``name -> (frozen, array)`` after validating magic, version and checksum."""
    if len(buf) < len(MAGIC) + 32 or buf[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    body, digest = buf[:-32], buf[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checksum mismatch: checkpoint is corrupt")
    r = _Reader(body)
    r.take(len(MAGIC))
    version, hlen = r.unpack("<HI")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    header = json.loads(r.take(hlen).decode("utf-8"))
    (count,) = r.unpack("<I")
    records = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        frozen, ndim = r.unpack("<BB")
        shape = r.unpack(f"<{ndim}Q") if ndim else ()
        size = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(r.take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
        records[name] = (bool(frozen), arr)
    if r.pos != len(body):
        raise CheckpointError("trailing bytes after the last record")
    return header, records


def from_bytes(buf: bytes) -> tuple[ControlPrefixModel, dict]:
    header, records = read_records(buf)
    cfg = ModelConfig(**header["model"])
    prefix = PrefixConfig(**header["prefix"])
    schema = AttributeSchema.from_dict(header["schema"])
    vocab = Vocab(header["vocab"])
    # build a skeleton with the right parameter names, then overwrite every value
    rng = derive_rng(0, "checkpoint.skeleton")
    base = Seq2SeqTransformer(cfg, rng)
    model = ControlPrefixModel.create(base, vocab, schema, prefix, rng, header["special_tokens"],
                                      header["control_tokens"])
    if header["folded"]:
        model = model.fold()
    params = {p.name: p for p in _all_parameters(model)}
    if set(params) != set(records):
        missing = sorted(set(params) - set(records))
        unknown = sorted(set(records) - set(params))
        raise CheckpointError(f"parameter names do not match (missing {missing[:5]}, unknown {unknown[:5]})")
    for name, (frozen, arr) in records.items():
        p = params[name]
        if p.data.shape != arr.shape:
            raise CheckpointError(f"{name}: shape {arr.shape} != expected {p.data.shape}")
        p.data = arr.copy()
        if frozen:
            p.freeze()
        else:
            p.unfreeze()
    return model, header


def load(path: str | Path) -> tuple[ControlPrefixModel, dict]:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint ({exc})") from None
    return from_bytes(buf)
