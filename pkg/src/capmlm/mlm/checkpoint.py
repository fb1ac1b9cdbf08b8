"""Binary checkpoint: ``LCAP`` magic, header JSON, then named float32 tensors.

Layout (all integers little-endian)::

    4s   magic b"LCAP"
    u16  format version
    u32  header length H
    H    UTF-8 JSON header (model/train config, vocab hash, repr kind, ...)
    u32  tensor count T
    T x  { u16 name length, name (UTF-8), u8 ndim, ndim x u32 dims,
           prod(dims) x float32 row-major }
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import CorruptHeader, VocabHashMismatch
from .config import ModelConfig, TrainConfig
from .model import ModelParams

MAGIC = b"LCAP"
VERSION = 1


@dataclass
class Checkpoint:
    params: ModelParams
    train_config: TrainConfig
    vocab_hash: str
    repr_kind: str
    config_hash: str = ""
    extra: dict = field(default_factory=dict)


def dumps(ck: Checkpoint) -> bytes:
    header = {
        "model_config": ck.params.config.to_dict(),
        "train_config": ck.train_config.to_dict(),
        "vocab_hash": ck.vocab_hash,
        "repr_kind": ck.repr_kind,
        "config_hash": ck.config_hash,
        "extra": ck.extra,
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<HI", VERSION, len(hb)), hb]
    names = ck.params.names()
    parts.append(struct.pack("<I", len(names)))
    for name in names:
        t = np.ascontiguousarray(ck.params[name], dtype="<f4")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", t.ndim))
        parts.append(struct.pack(f"<{t.ndim}I", *t.shape))
        parts.append(t.tobytes())
    return b"".join(parts)


def loads(data: bytes, expect_vocab_hash: str | None = None, dtype="float32") -> Checkpoint:
    if data[:4] != MAGIC:
        raise CorruptHeader("not a checkpoint (bad magic)")
    try:
        version, hlen = struct.unpack_from("<HI", data, 4)
        if version != VERSION:
            raise CorruptHeader(f"unsupported checkpoint version {version}")
        off = 10
        header = json.loads(data[off : off + hlen].decode("utf-8"))
        off += hlen
        if expect_vocab_hash is not None and header["vocab_hash"] != expect_vocab_hash:
            raise VocabHashMismatch(
                f"checkpoint vocab hash {header['vocab_hash']} != vocabulary {expect_vocab_hash}"
            )
        (count,) = struct.unpack_from("<I", data, off)
        off += 4
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off : off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<B", data, off)
            off += 1
            dims = struct.unpack_from(f"<{ndim}I", data, off)
            off += 4 * ndim
            size = int(np.prod(dims, dtype=np.int64)) * 4
            if off + size > len(data):
                raise CorruptHeader(f"tensor {name} truncated")
            tensors[name] = np.frombuffer(data, dtype="<f4", count=size // 4, offset=off).reshape(dims).astype(dtype)
            off += size
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, KeyError) as exc:
        raise CorruptHeader(f"malformed checkpoint: {exc}") from exc
    if off != len(data):
        raise CorruptHeader("trailing bytes after last tensor")
    params = ModelParams(ModelConfig.from_dict(header["model_config"]), tensors)
    return Checkpoint(
        params,
        TrainConfig.from_dict(header["train_config"]),
        header["vocab_hash"],
        header["repr_kind"],
        header.get("config_hash", ""),
        header.get("extra", {}),
    )


def save(ck: Checkpoint, path) -> None:
    Path(path).write_bytes(dumps(ck))


def load(path, expect_vocab_hash: str | None = None, dtype="float32") -> Checkpoint:
    return loads(Path(path).read_bytes(), expect_vocab_hash, dtype)
