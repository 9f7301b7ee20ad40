"""Binary checkpoints for solutions, initializations and Bezier paths.

Layout (all integers little-endian)::

    b"SLLB" | u16 version | u8 endian flag (1 = little) | u8 reserved
    u32 header length | header JSON (utf-8)
    n_vectors x f64[n_params]            parameter vectors, segment order
    per BN layer: f64[width] mean, f64[width] var   (if has_bn_stats)
    ceil(n_params / 8) bytes              packed keep-mask, LSB first (if has_mask)

The header JSON names every segment (layer, kind, shape) so a reader can
rebuild the layout and check it against the architecture.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .net import BatchNormStats
from .params import Architecture, Layout, ParamVector
from .sparsity import Exclusions, SparsityMask

MAGIC = b"SLLB"
VERSION = 1
LITTLE_ENDIAN = 1
_PREFIX = struct.Struct("<4sHBBI")


class CheckpointError(ValueError):
    pass


def atomic_write(path, data: bytes) -> None:
    """Write via a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass
class Checkpoint:
    vectors: list[ParamVector]
    mask: SparsityMask | None = None
    bn_stats: BatchNormStats | None = None
    provenance: dict = field(default_factory=dict)

    @property
    def params(self) -> ParamVector:
        return self.vectors[0]

    @property
    def arch(self) -> Architecture:
        return self.vectors[0].arch

    @property
    def label(self) -> str:
        return self.provenance.get("label", "")


def _header(ckpt: Checkpoint) -> dict:
    layout = ckpt.vectors[0].layout
    for v in ckpt.vectors[1:]:
        if v.layout != layout:
            raise CheckpointError("all vectors in a checkpoint must share one layout")
    bn_layers = sorted(ckpt.bn_stats.mean) if ckpt.bn_stats is not None else []
    return {
        "arch": layout.arch.to_dict(),
        "segments": [{"layer": s.layer, "kind": s.kind, "shape": list(s.shape)} for s in layout.segments],
        "n_params": layout.size,
        "n_vectors": len(ckpt.vectors),
        "has_mask": ckpt.mask is not None,
        "exclusions": ckpt.mask.exclusions.to_dict() if ckpt.mask is not None else None,
        "bn_layers": bn_layers,
        "provenance": ckpt.provenance,
    }


def dumps(ckpt: Checkpoint) -> bytes:
    header = json.dumps(_header(ckpt), sort_keys=True, separators=(",", ":")).encode()
    parts = [_PREFIX.pack(MAGIC, VERSION, LITTLE_ENDIAN, 0, len(header)), header]
    for v in ckpt.vectors:
        parts.append(v.values.astype("<f8").tobytes())
    if ckpt.bn_stats is not None:
        for layer in sorted(ckpt.bn_stats.mean):
            parts.append(ckpt.bn_stats.mean[layer].astype("<f8").tobytes())
            parts.append(ckpt.bn_stats.var[layer].astype("<f8").tobytes())
    if ckpt.mask is not None:
        if ckpt.mask.layout != ckpt.vectors[0].layout:
            raise CheckpointError("mask layout does not match the parameters")
        parts.append(np.packbits(ckpt.mask.bits, bitorder="little").tobytes())
    return b"".join(parts)


def loads(data: bytes) -> Checkpoint:
    if len(data) < _PREFIX.size:
        raise CheckpointError("file too short for a checkpoint header")
    magic, version, endian, _, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"bad checkpoint magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if endian != LITTLE_ENDIAN:
        raise CheckpointError(f"unsupported endianness flag {endian}")
    pos = _PREFIX.size
    if pos + hlen > len(data):
        raise CheckpointError(f"truncated header: need {hlen} bytes, have {len(data) - pos}")
    try:
        header = json.loads(data[pos:pos + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint header: {exc}") from exc
    pos += hlen

    arch = Architecture.from_dict(header["arch"])
    layout = Layout.for_arch(arch)
    stored = [(s["layer"], s["kind"], tuple(s["shape"])) for s in header["segments"]]
    expected = [(s.layer, s.kind, s.shape) for s in layout.segments]
    if stored != expected:
        raise CheckpointError("segment table does not match the architecture")
    n = layout.size

    def take(count: int) -> np.ndarray:
        nonlocal pos
        nbytes = 8 * count
        if pos + nbytes > len(data):
            raise CheckpointError(f"truncated payload: need {nbytes} bytes at offset {pos}, have {len(data) - pos}")
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=pos).astype(np.float64)
        pos += nbytes
        return arr

    vectors = [ParamVector(take(n), layout) for _ in range(header["n_vectors"])]
    bn_stats = None
    if header["bn_layers"]:
        bn_stats = BatchNormStats()
        for layer in header["bn_layers"]:
            width = arch.layer_sizes[layer + 1]
            bn_stats.mean[layer] = take(width)
            bn_stats.var[layer] = take(width)
    mask = None
    if header["has_mask"]:
        nbytes = (n + 7) // 8
        if pos + nbytes > len(data):
            raise CheckpointError("truncated mask bitset")
        bits = np.unpackbits(np.frombuffer(data, np.uint8, nbytes, pos), count=n, bitorder="little").astype(bool)
        pos += nbytes
        mask = SparsityMask(bits, layout, Exclusions.from_dict(header["exclusions"] or {}))
    if pos != len(data):
        raise CheckpointError(f"{len(data) - pos} trailing bytes after checkpoint payload")
    return Checkpoint(vectors, mask, bn_stats, header["provenance"])


def write_checkpoint(path, ckpt: Checkpoint) -> None:
    atomic_write(path, dumps(ckpt))


def read_checkpoint(path) -> Checkpoint:
    return loads(Path(path).read_bytes())


HISTORY_COLUMNS = ("step", "total", "cross_entropy", "l2_term", "train_accuracy", "eval_accuracy")


def history_csv(history) -> str:
    lines = [",".join(HISTORY_COLUMNS)]
    for row in history:
        t = row.train
        vals = [t.total, t.cross_entropy, t.l2_term, t.accuracy, row.eval_accuracy]
        lines.append(f"{row.step}," + ",".join(f"{v:.17g}" for v in vals))
    return "\n".join(lines) + "\n"
