"""Binary checkpoint format.

Layout, all integers little-endian::

    b"MATCKPT1"
    u32 version (=1)
    u32 config length, config as UTF-8 key=value lines
    u32 tensor count
    per tensor: u16 name length, UTF-8 name, u8 ndim, ndim x u64 dims,
                binary32 payload in row-major order
    u64 training step
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .errors import ConfigError, FormatError, PayloadError, TruncatedError, VersionError
from .model import Model, ModelConfig, param_specs

MAGIC = b"MATCKPT1"
VERSION = 1


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict = field(default_factory=dict)  # name -> float32 array
    step: int = 0
    version: int = VERSION

    @classmethod
    def from_model(cls, model: Model, step: int = 0) -> "Checkpoint":
        params = {n: np.asarray(a, dtype=np.float32) for n, a in model.arrays().items()}
        return cls(model.cfg, params, step)

    def to_model(self, dtype=np.float32) -> Model:
        return Model(self.config, self.params, dtype=dtype)


def to_bytes(ckpt: Checkpoint) -> bytes:
    out = bytearray(MAGIC)
    blob = ckpt.config.to_text().encode("utf-8")
    out += struct.pack("<II", ckpt.version, len(blob))
    out += blob
    out += struct.pack("<I", len(ckpt.params))
    for name, arr in ckpt.params.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        out += arr.tobytes()
    out += struct.pack("<Q", ckpt.step)
    return bytes(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedError(f"file ends inside {what} at byte {self.pos}")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def from_bytes(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    magic = r.take(len(MAGIC), "magic")
    if magic != MAGIC:
        raise FormatError(f"not a checkpoint: magic {magic!r}")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise VersionError(f"unsupported checkpoint version {version}")
    (n_cfg,) = r.unpack("<I", "config length")
    try:
        config = ModelConfig.from_text(r.take(n_cfg, "config").decode("utf-8")).validate()
    except (UnicodeDecodeError, ConfigError, ValueError) as exc:
        raise PayloadError(f"bad config blob: {exc}") from None
    (count,) = r.unpack("<I", "tensor count")
    params = {}
    for k in range(count):
        (n_name,) = r.unpack("<H", f"tensor {k} name length")
        name = r.take(n_name, f"tensor {k} name").decode("utf-8")
        (ndim,) = r.unpack("<B", f"{name} ndim")
        dims = r.unpack(f"<{ndim}Q", f"{name} dims")
        size = int(np.prod(dims, dtype=np.int64)) if dims else 1
        payload = r.take(4 * size, f"{name} payload")
        if name in params:
            raise PayloadError(f"tensor {name} appears twice")
        params[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    (step,) = r.unpack("<Q", "training step")
    if r.pos != len(buf):
        raise PayloadError(f"{len(buf) - r.pos} trailing bytes after the training step")

    expected = {n: s for n, s, _ in param_specs(config)}
    if set(expected) != set(params):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise PayloadError(f"tensor table disagrees with config: missing {missing[:3]}, "
                           f"unexpected {extra[:3]}")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise PayloadError(f"tensor {name} has shape {params[name].shape}, config implies {shape}")
    return Checkpoint(config, params, step, version)


def save_checkpoint(obj: Union[Model, Checkpoint], path: Union[str, os.PathLike], step: int = 0) -> Checkpoint:
    ckpt = obj if isinstance(obj, Checkpoint) else Checkpoint.from_model(obj, step)
    data = to_bytes(ckpt)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
    return ckpt


def load_checkpoint(path: Union[str, os.PathLike]) -> Checkpoint:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
