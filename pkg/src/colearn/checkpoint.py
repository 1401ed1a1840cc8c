"""Little-endian binary checkpoints.

Layout::

    magic      4 bytes  b"CLCK"
    version    u32      1
    config     u32 length + UTF-8 ``key=value`` lines (model configuration)
    meta       u32 length + UTF-8 JSON object (step, scores, ...)
    n_params   u32
      name_len u16, name bytes, ndim u8, dims u32 * ndim, values f64 * prod(dims)
    optimizer  u8 present; if 1: step u64, count u64, first moments f64 * count,
               second moments f64 * count (flat, in parameter order)
    n_rng      u32
      name_len u16, name bytes, state u128, inc u128, has_uint32 u8, uinteger u32
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import format_kv, parse_kv
from .model import DualDecoderModel, ModelConfig

MAGIC = b"CLCK"
VERSION = 1


@dataclass
class OptimizerState:
    step: int
    m: np.ndarray
    v: np.ndarray


@dataclass
class Checkpoint:
    model: DualDecoderModel
    optimizer: OptimizerState | None = None
    rng_states: dict[str, dict] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def _u128(x: int) -> bytes:
    return int(x).to_bytes(16, "little")


def _write_str(buf, s: str, fmt: str = "<I") -> None:
    raw = s.encode("utf-8")
    buf.write(struct.pack(fmt, len(raw)))
    buf.write(raw)


def _read(buf, fmt: str):
    size = struct.calcsize(fmt)
    raw = buf.read(size)
    if len(raw) != size:
        raise ValueError("truncated checkpoint")
    return struct.unpack(fmt, raw)


def _read_str(buf, fmt: str = "<I") -> str:
    (n,) = _read(buf, fmt)
    raw = buf.read(n)
    if len(raw) != n:
        raise ValueError("truncated checkpoint")
    return raw.decode("utf-8")


def _read_f64(buf, count: int) -> np.ndarray:
    raw = buf.read(8 * count)
    if len(raw) != 8 * count:
        raise ValueError("truncated checkpoint")
    return np.frombuffer(raw, dtype="<f8").astype(np.float64)


def to_bytes(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    _write_str(buf, format_kv(ckpt.model.config.to_dict()))
    _write_str(buf, json.dumps(ckpt.meta, sort_keys=True))
    params = ckpt.model.params
    buf.write(struct.pack("<I", len(params.shapes)))
    for name, shape in params.shapes.items():
        _write_str(buf, name, "<H")
        buf.write(struct.pack("<B", len(shape)))
        buf.write(struct.pack(f"<{len(shape)}I", *shape))
        buf.write(np.ascontiguousarray(params[name].data, dtype="<f8").tobytes())
    opt = ckpt.optimizer
    if opt is None:
        buf.write(struct.pack("<B", 0))
    else:
        buf.write(struct.pack("<BQQ", 1, opt.step, opt.m.size))
        buf.write(np.ascontiguousarray(opt.m, dtype="<f8").tobytes())
        buf.write(np.ascontiguousarray(opt.v, dtype="<f8").tobytes())
    buf.write(struct.pack("<I", len(ckpt.rng_states)))
    for name, state in ckpt.rng_states.items():
        if state.get("bit_generator") != "PCG64":
            raise ValueError("only PCG64 generator states can be stored")
        _write_str(buf, name, "<H")
        buf.write(_u128(state["state"]["state"]))
        buf.write(_u128(state["state"]["inc"]))
        buf.write(struct.pack("<BI", int(state["has_uint32"]), int(state["uinteger"])))
    return buf.getvalue()


def from_bytes(raw: bytes, dtype=None) -> Checkpoint:
    buf = io.BytesIO(raw)
    if buf.read(4) != MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    (version,) = _read(buf, "<I")
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    config = ModelConfig(**parse_kv(_read_str(buf), ModelConfig))
    meta = json.loads(_read_str(buf))
    model = DualDecoderModel(config, seed=0, dtype=dtype or np.float64)
    (n_params,) = _read(buf, "<I")
    seen = set()
    for _ in range(n_params):
        name = _read_str(buf, "<H")
        (ndim,) = _read(buf, "<B")
        shape = _read(buf, f"<{ndim}I")
        if name not in model.params or tuple(model.params.shapes[name]) != tuple(shape):
            raise ValueError(f"parameter {name!r} does not match the stored configuration")
        model.params[name].data[...] = _read_f64(buf, int(np.prod(shape))).reshape(shape)
        seen.add(name)
    missing = set(model.params.names()) - seen
    if missing:
        raise ValueError(f"checkpoint lacks parameters: {sorted(missing)[:3]}")
    (has_opt,) = _read(buf, "<B")
    optimizer = None
    if has_opt:
        step, count = _read(buf, "<QQ")
        optimizer = OptimizerState(int(step), _read_f64(buf, count), _read_f64(buf, count))
    (n_rng,) = _read(buf, "<I")
    rng_states = {}
    for _ in range(n_rng):
        name = _read_str(buf, "<H")
        state = int.from_bytes(buf.read(16), "little")
        inc = int.from_bytes(buf.read(16), "little")
        has_uint32, uinteger = _read(buf, "<BI")
        rng_states[name] = {"bit_generator": "PCG64", "state": {"state": state, "inc": inc},
                            "has_uint32": has_uint32, "uinteger": uinteger}
    return Checkpoint(model, optimizer, rng_states, meta)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


def load_checkpoint(path, dtype=None) -> Checkpoint:
    return from_bytes(Path(path).read_bytes(), dtype=dtype)
