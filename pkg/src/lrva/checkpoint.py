"""Binary checkpoint format and the training state it carries.

Layout, all little-endian::

    b"LRVA"  u16 version  u32 n_tensors
    per tensor: u16 name_len, name (UTF-8), u8 frozen, u8 rank, u32 dims[rank], f32 payload

Tensors are held as float64 in memory and rounded to float32 on save.  Text
(the serialized config) rides along as a rank-1 tensor of byte values, which
f32 represents exactly.  Batch order and augmentation draws are pure
functions of (seed, epoch, step), so no generator state is stored.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

MAGIC = b"LRVA"
VERSION = 1

CONFIG_KEY = "meta.config"


class CheckpointError(ValueError):
    pass


def write_tensors(path: str, tensors) -> None:
    """``tensors`` is an iterable of (name, array, frozen)."""
    tensors = list(tensors)
    chunks = [MAGIC, struct.pack("<HI", VERSION, len(tensors))]
    for name, arr, frozen in tensors:
        arr = np.asarray(arr, dtype=np.float64)
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise CheckpointError(f"tensor {name!r} cannot be encoded")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<BB", int(bool(frozen)), arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.astype("<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def read_tensors(path: str) -> "OrderedDict[str, tuple]":
    """name -> (float64 array, frozen flag), in file order."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: not an LRVA checkpoint")
    version, count = struct.unpack_from("<HI", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos = 10
    out: "OrderedDict[str, tuple]" = OrderedDict()
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos : pos + n].decode("utf-8")
            pos += n
            frozen, rank = struct.unpack_from("<BB", buf, pos)
            pos += 2
            shape = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            size = int(np.prod(shape, dtype=np.int64))
            if pos + 4 * size > len(buf):
                raise CheckpointError(f"{path}: truncated payload for {name!r}")
            arr = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).astype(np.float64).reshape(shape)
            pos += 4 * size
            out[name] = (arr, bool(frozen))
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated header") from exc
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return out


def text_to_tensor(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float64)


def tensor_to_text(arr: np.ndarray) -> str:
    return np.asarray(arr).astype(np.uint8).tobytes().decode("utf-8")


@dataclass
class TrainState:
    config_text: str
    params: "OrderedDict[str, tuple]"  # name -> (array, frozen)
    step: int = 0
    epoch: int = 0
    adam_t: int = 0
    moments: dict = field(default_factory=dict)  # opt.m.* / opt.v.*
    bank: Optional[np.ndarray] = None
    n_classes: int = 0
    key_params: dict = field(default_factory=dict)  # key.* momentum copies

    def tensors(self):
        yield CONFIG_KEY, text_to_tensor(self.config_text), True
        yield "meta.n_classes", np.asarray(float(self.n_classes)), True
        for k in ("step", "epoch", "adam_t"):
            yield f"state.{k}", np.asarray(float(getattr(self, k))), False
        for name, (arr, frozen) in self.params.items():
            yield name, arr, frozen
        for name in sorted(self.moments):
            yield name, self.moments[name], False
        for name in sorted(self.key_params):
            yield name, self.key_params[name], False
        if self.bank is not None and len(self.bank):
            yield "state.bank", self.bank, False


def save_state(path: str, state: TrainState) -> None:
    write_tensors(path, state.tensors())


def load_state(path: str) -> TrainState:
    raw = read_tensors(path)
    if CONFIG_KEY not in raw:
        raise CheckpointError(f"{path}: no embedded config")
    params: "OrderedDict[str, tuple]" = OrderedDict()
    moments, keys, bank = {}, {}, None
    for name, (arr, frozen) in raw.items():
        if name.startswith("opt."):
            moments[name] = arr
        elif name.startswith("key."):
            keys[name] = arr
        elif name == "state.bank":
            bank = arr
        elif not (name.startswith("meta.") or name.startswith("state.")):
            params[name] = (arr, frozen)
    scalar = lambda k: int(raw[k][0]) if k in raw else 0
    return TrainState(
        config_text=tensor_to_text(raw[CONFIG_KEY][0]),
        params=params,
        step=scalar("state.step"),
        epoch=scalar("state.epoch"),
        adam_t=scalar("state.adam_t"),
        moments=moments,
        bank=bank,
        n_classes=scalar("meta.n_classes"),
        key_params=keys,
    )
