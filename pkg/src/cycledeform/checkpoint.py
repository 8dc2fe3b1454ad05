"""Binary checkpoints.

Layout (all integers little-endian)::

    b"CYDF" | u32 version
    u32 n | n x i32 architecture descriptor
    u32 len | UTF-8 JSON training config
    u8 dtype code (4 = float32, 8 = float64)
    parameter arrays in declaration order (raw little-endian)
    u64 Adam step | Adam first moments | Adam second moments
    u32 epoch
    u32 len | UTF-8 JSON {"rng": bit generator state, "history": loss curve}
    u32 CRC32 of every preceding byte
"""
from __future__ import annotations

import io
import json
import os
import struct
import zlib

import numpy as np

from .errors import CorruptFile, VersionMismatch
from .model import Model, ModelConfig, parameter_shapes

MAGIC = b"CYDF"
VERSION = 1
DTYPE_CODES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


def _json_default(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(type(obj))


def _blob(obj) -> bytes:
    data = json.dumps(obj, default=_json_default).encode()
    return struct.pack("<I", len(data)) + data


def encode_checkpoint(state) -> bytes:
    cfg = state.model.cfg
    dtype = state.model.dtype
    out = io.BytesIO()
    out.write(MAGIC + struct.pack("<I", VERSION))
    desc = cfg.descriptor()
    out.write(struct.pack("<I", len(desc)) + np.asarray(desc, dtype="<i4").tobytes())
    out.write(_blob(state.cfg.to_dict()))
    out.write(struct.pack("<B", dtype.itemsize))
    le = dtype.newbyteorder("<")
    names = [k for k, _ in parameter_shapes(cfg)]
    for k in names:
        out.write(np.ascontiguousarray(state.model.params[k], dtype=le).tobytes())
    out.write(struct.pack("<Q", state.adam.step))
    for moments in (state.adam.m, state.adam.v):
        for k in names:
            out.write(np.ascontiguousarray(moments[k], dtype=le).tobytes())
    out.write(struct.pack("<I", state.epoch))
    out.write(_blob({"rng": state.rng.bit_generator.state, "history": state.history}))
    body = out.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.at = data, 0

    def take(self, n: int) -> bytes:
        if self.at + n > len(self.data):
            raise CorruptFile("checkpoint is truncated")
        chunk = self.data[self.at:self.at + n]
        self.at += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype, shape) -> np.ndarray:
        count = int(np.prod(shape))
        return np.frombuffer(self.take(count * dtype.itemsize), dtype=dtype).reshape(shape).copy()

    def json(self):
        (n,) = self.unpack("<I")
        try:
            return json.loads(self.take(n).decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CorruptFile(f"bad JSON block: {exc}") from exc


def decode_checkpoint(data: bytes):
    from .training import AdamState, TrainConfig, TrainingState

    if len(data) < 12 or data[:4] != MAGIC:
        raise CorruptFile("not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", data[4:8])
    if version != VERSION:
        raise VersionMismatch(f"checkpoint version {version}, expected {VERSION}")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptFile("checksum mismatch")
    r = _Reader(body)
    r.take(8)
    (n,) = r.unpack("<I")
    try:
        model_cfg = ModelConfig.from_descriptor(r.array(np.dtype("<i4"), (n,)))
        cfg = TrainConfig.from_dict(r.json())
    except (ValueError, TypeError) as exc:
        raise CorruptFile(f"bad configuration: {exc}") from exc
    if cfg.model_config() != model_cfg:
        raise CorruptFile("architecture descriptor disagrees with the stored config")
    (code,) = r.unpack("<B")
    if code not in DTYPE_CODES:
        raise CorruptFile(f"unknown dtype code {code}")
    dtype = DTYPE_CODES[code]
    shapes = parameter_shapes(model_cfg)
    params = {k: r.array(dtype, s) for k, s in shapes}
    (step,) = r.unpack("<Q")
    m = {k: r.array(dtype, s) for k, s in shapes}
    v = {k: r.array(dtype, s) for k, s in shapes}
    (epoch,) = r.unpack("<I")
    extra = r.json()
    if r.at != len(body):
        raise CorruptFile("trailing bytes after checkpoint payload")
    native = dtype.newbyteorder("=")
    params = {k: a.astype(native) for k, a in params.items()}
    adam = AdamState({k: a.astype(native) for k, a in m.items()},
                     {k: a.astype(native) for k, a in v.items()}, step)
    rng = np.random.Generator(np.random.PCG64())
    try:
        rng.bit_generator.state = extra["rng"]
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptFile(f"bad RNG state: {exc}") from exc
    model = Model(model_cfg, dtype=native, params=params)
    return TrainingState(cfg, model, adam, rng, epoch, list(extra.get("history", [])))


def save_checkpoint(path, state) -> None:
    data = encode_checkpoint(state)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())
