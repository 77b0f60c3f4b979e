"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"MLGN" | u32 version
    section*  where section = 4-byte tag | u64 payload length | payload
    b"END!" | u32 crc32 of every preceding byte

Sections: ``CONF`` canonical JSON (model config, train config, task, epoch,
metrics), ``PARM`` parameter blocks, ``OPTM`` u64 step followed by Adam
moment blocks. A block is u16 name length | utf-8 name | u8 ndim |
u32 extent per axis | raw float64 values.
"""

from __future__ import annotations

import io
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError
from .model import ModelConfig, ModelParams, parameter_shapes
from .numerics import Tensor

MAGIC = b"MLGN"
FORMAT_VERSION = 1


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_params(cls, params: ModelParams) -> "OptimizerState":
        return cls({n: np.zeros_like(t.data) for n, t in params.tensors.items()},
                   {n: np.zeros_like(t.data) for n, t in params.tensors.items()}, 0)

    def copy(self) -> "OptimizerState":
        return OptimizerState({k: a.copy() for k, a in self.m.items()},
                              {k: a.copy() for k, a in self.v.items()}, self.step)


@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: ModelParams
    opt_state: OptimizerState
    train_config: dict
    epoch: int = 0
    metrics: dict = field(default_factory=dict)
    task: str | None = None
    version: int = FORMAT_VERSION


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _write_block(buf: io.BytesIO, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<B", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _section(tag: bytes, payload: bytes) -> bytes:
    return tag + struct.pack("<Q", len(payload)) + payload


def dumps_checkpoint(ckpt: Checkpoint) -> bytes:
    conf = {"model_config": ckpt.model_config.to_dict(), "train_config": ckpt.train_config,
            "task": ckpt.task, "epoch": ckpt.epoch, "metrics": ckpt.metrics}
    parm = io.BytesIO()
    parm.write(struct.pack("<I", len(ckpt.params.tensors)))
    for name, t in ckpt.params.tensors.items():
        _write_block(parm, name, t.data)
    optm = io.BytesIO()
    optm.write(struct.pack("<QI", ckpt.opt_state.step, len(ckpt.opt_state.m)))
    for name in ckpt.opt_state.m:
        _write_block(optm, "m." + name, ckpt.opt_state.m[name])
        _write_block(optm, "v." + name, ckpt.opt_state.v[name])
    body = (MAGIC + struct.pack("<I", FORMAT_VERSION)
            + _section(b"CONF", canonical_json(conf).encode("utf-8"))
            + _section(b"PARM", parm.getvalue())
            + _section(b"OPTM", optm.getvalue()))
    return body + b"END!" + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError("checkpoint is truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def block(self) -> tuple[str, np.ndarray]:
        (n,) = self.unpack("<H")
        name = self.take(n).decode("utf-8")
        (ndim,) = self.unpack("<B")
        shape = self.unpack(f"<{ndim}I")
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(self.take(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
        return name, arr


def loads_checkpoint(data: bytes) -> Checkpoint:
    if len(data) < 16 or data[:4] != MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", data[4:8])
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    if data[-8:-4] != b"END!":
        raise FormatError("checkpoint is truncated (missing end marker)")
    body = data[:-8]
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise FormatError("checkpoint checksum mismatch")

    r = _Reader(body)
    r.pos = 8
    sections = {}
    while r.pos < len(body):
        tag = r.take(4)
        (length,) = r.unpack("<Q")
        sections[tag] = r.take(length)
    for tag in (b"CONF", b"PARM", b"OPTM"):
        if tag not in sections:
            raise FormatError(f"checkpoint lacks section {tag.decode()}")

    try:
        conf = json.loads(sections[b"CONF"].decode("utf-8"))
        config = ModelConfig.from_dict(conf["model_config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"bad config section: {exc}") from exc

    pr = _Reader(sections[b"PARM"])
    (count,) = pr.unpack("<I")
    tensors = dict(pr.block() for _ in range(count))
    shapes = parameter_shapes(config)
    if list(tensors) != list(shapes):
        raise FormatError("parameter names do not match the embedded config")
    for name, shape in shapes.items():
        if tensors[name].shape != shape:
            raise FormatError(f"parameter {name}: shape {tensors[name].shape} != config shape {shape}")
    params = ModelParams(config, {n: Tensor(a, requires_grad=True) for n, a in tensors.items()})

    orr = _Reader(sections[b"OPTM"])
    step, count = orr.unpack("<QI")
    m, v = {}, {}
    for _ in range(count):
        name_m, am = orr.block()
        name_v, av = orr.block()
        key = name_m[2:]
        if key not in shapes or am.shape != shapes[key] or av.shape != shapes[key] or name_v != "v." + key:
            raise FormatError(f"optimizer block {name_m!r} does not match parameters")
        m[key], v[key] = am, av
    return Checkpoint(config, params, OptimizerState(m, v, int(step)), conf.get("train_config", {}),
                      int(conf.get("epoch", 0)), conf.get("metrics", {}), conf.get("task"), version)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dumps_checkpoint(ckpt))
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    return loads_checkpoint(Path(path).read_bytes())
