"""Versioned binary container for named float64 tensors plus a JSON config echo.

Layout (little-endian)::

    b"LDRC"  u32 version
    u32 config_len   config_len bytes of UTF-8 JSON (sorted keys)
    u32 n_tensors
    n_tensors x { u16 name_len, name bytes, u8 ndim, ndim x u32 dim, prod(dims) x f64 }
    u32 crc32 of every preceding byte
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .model import StudentConfig, StudentModel, init_params
from .teacher import TeacherHead

MAGIC = b"LDRC"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: dict
    tensors: dict


def write_checkpoint(path, config: dict, tensors: dict) -> None:
    blob = bytearray(MAGIC + struct.pack("<I", VERSION))
    cfg = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob += struct.pack("<I", len(cfg)) + cfg
    blob += struct.pack("<I", len(tensors))
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        blob += struct.pack("<H", len(raw)) + raw
        blob += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += arr.tobytes(order="C")
    blob += struct.pack("<I", zlib.crc32(bytes(blob)))
    with open(path, "wb") as f:
        f.write(bytes(blob))


def read_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 12 or data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc:
        raise CheckpointError(f"{path}: checksum mismatch, file is corrupt")
    try:
        off = 8
        (n,) = struct.unpack_from("<I", data, off)
        off += 4
        config = json.loads(data[off:off + n].decode("utf-8"))
        off += n
        (count,) = struct.unpack_from("<I", data, off)
        off += 4
        tensors = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off:off + n].decode("utf-8")
            off += n
            (ndim,) = struct.unpack_from("<B", data, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", data, off)
            off += 4 * ndim
            size = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(data, dtype="<f8", count=size, offset=off).reshape(shape)
            off += 8 * size
            tensors[name] = arr.astype(np.float64)
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint ({exc})") from exc
    if off != len(data) - 4:
        raise CheckpointError(f"{path}: {len(data) - 4 - off} unexpected trailing bytes")
    return Checkpoint(config, tensors)


def save_checkpoint(model: StudentModel, path, run_config: Optional[dict] = None) -> None:
    config = {"kind": "student", "student": model.config.to_dict(), "run": run_config or {}}
    write_checkpoint(path, config, model.params.arrays())


def load_checkpoint(path, expected: Optional[StudentConfig] = None) -> StudentModel:
    """Rebuild a student; ``expected`` must match the stored architecture if given."""
    ckpt = read_checkpoint(path)
    if ckpt.config.get("kind") != "student":
        raise CheckpointError(f"{path}: not a student checkpoint")
    config = StudentConfig.from_dict(ckpt.config["student"])
    if expected is not None:
        stored, want = config.to_dict(), expected.to_dict()
        diff = sorted(k for k in want if k != "seed" and want[k] != stored.get(k))
        if diff:
            raise CheckpointError(f"{path}: config mismatch on {diff} "
                                  f"(stored {[stored[k] for k in diff]}, expected {[want[k] for k in diff]})")
    model = StudentModel(config, init_params(config))
    try:
        model.params.assign(ckpt.tensors)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    return model


def run_config(path) -> dict:
    return read_checkpoint(path).config.get("run", {})


def save_teacher_head(head: TeacherHead, path) -> None:
    write_checkpoint(path, {"kind": "teacher_head", "gamma": head.gamma}, {"W_CLS": head.w_cls})


def load_teacher_head(path) -> TeacherHead:
    ckpt = read_checkpoint(path)
    if ckpt.config.get("kind") != "teacher_head":
        raise CheckpointError(f"{path}: not a teacher head checkpoint")
    return TeacherHead(ckpt.tensors["W_CLS"], ckpt.config["gamma"])
