"""Binary checkpoints: named little-endian tensors plus a config snapshot.

Layout::

    b"READS001" | u32 version | u32 n | n bytes UTF-8 JSON header
    u32 record count, then per record:
        u16 name length | name | u8 dtype code | u8 ndim | ndim x u64 dims | raw data

The header holds the run config, step counter and alphabet.  Optimizer
accumulators are stored as ordinary records under ``optim.sq_grad.<i>`` and
``optim.sq_delta.<i>``.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .alphabet import Alphabet
from .config import RunConfig
from .model import Recognizer
from .optim import OptimizerState

MAGIC = b"READS001"
VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8")}
_CODES = {v: k for k, v in _DTYPES.items()}


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    config: RunConfig
    step: int
    alphabet: str
    tensors: dict
    optimizer: Optional[OptimizerState] = None


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    dt = np.dtype(arr.dtype).newbyteorder("<")
    if dt not in _CODES:
        raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
    raw = np.ascontiguousarray(arr, dtype=dt).tobytes()
    key = name.encode("utf-8")
    head = struct.pack("<H", len(key)) + key + struct.pack("<BB", _CODES[dt], arr.ndim)
    return head + struct.pack(f"<{arr.ndim}Q", *arr.shape) + raw


def save_checkpoint(path, model: Recognizer, cfg: RunConfig, step: int,
                    optimizer: Optional[OptimizerState] = None) -> Path:
    path = Path(path)
    header = {"config": cfg.to_dict(), "step": int(step), "alphabet": model.alphabet.chars}
    records = list(model.state_dict().items())
    if optimizer is not None:
        header["optimizer"] = {"rho": optimizer.rho, "eps": optimizer.eps, "steps": optimizer.steps,
                               "count": len(optimizer.sq_grad)}
        records += [(f"optim.sq_grad.{i}", a) for i, a in enumerate(optimizer.sq_grad)]
        records += [(f"optim.sq_delta.{i}", a) for i, a in enumerate(optimizer.sq_delta)]
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", VERSION, len(blob)) + blob)
        fh.write(struct.pack("<I", len(records)))
        for name, arr in records:
            fh.write(_pack_tensor(name, np.asarray(arr)))
    os.replace(tmp, path)
    return path


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint(path) -> Checkpoint:
    r = _Reader(Path(path).read_bytes())
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = r.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    header = json.loads(r.take(hlen).decode("utf-8"))
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        code, ndim = r.unpack("<BB")
        if code not in _DTYPES:
            raise CheckpointError(f"{name}: unknown dtype code {code}")
        shape = r.unpack(f"<{ndim}Q")
        dt = _DTYPES[code]
        size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        tensors[name] = np.frombuffer(r.take(size), dtype=dt).reshape(shape).copy()
    if r.pos != len(r.data):
        raise CheckpointError(f"{path}: {len(r.data) - r.pos} trailing bytes")
    opt = None
    if "optimizer" in header:
        o = header["optimizer"]
        k = o["count"]
        opt = OptimizerState(o["rho"], o["eps"], [tensors.pop(f"optim.sq_grad.{i}") for i in range(k)],
                             [tensors.pop(f"optim.sq_delta.{i}") for i in range(k)], o["steps"])
    return Checkpoint(RunConfig.from_dict(header["config"]), header["step"], header["alphabet"],
                      tensors, opt)


def load_model(path) -> tuple[Recognizer, Checkpoint]:
    """Rebuild the model described by the checkpoint and load its tensors.

    The stored name set must match the model exactly.
    """
    ckpt = read_checkpoint(path)
    cfg = ckpt.config
    model = Recognizer(cfg.model_config(), Alphabet(ckpt.alphabet), seed=cfg.seed, dtype=cfg.dtype)
    try:
        model.load_state_dict(ckpt.tensors)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: {exc}") from None
    return model, ckpt
