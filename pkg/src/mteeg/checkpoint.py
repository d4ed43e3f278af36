"""Binary checkpoints.

Layout (little-endian)::

    "MTEE"  version:u32  variant:u8
    task table   count:u32, per task id:u32 name:str16 classes:u32 loss:u8
                 channels:u32 duration:f64 subsample:f64
    config       length:u32 + UTF-8 JSON (backbone/adapter config, metadata)
    directory    count:u32, per tensor name:str16 dtype:u8 rank:u8
                 dims:u64[rank] offset:u64 flags:u8 (bit 0 = frozen)
    payloads     raw f64, at the absolute offsets given in the directory

``str16`` is a u16 byte length followed by UTF-8 bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from mteeg.backbone import BackboneConfig
from mteeg.model import MODEL_VARIANTS, ModelState, TaskSpec, build_model

MAGIC = b"MTEE"
VERSION = 1
DTYPE_F64 = 1
FLAG_FROZEN = 1
_LOSS_CODES = {"binary-ce": 0, "multiclass-ce": 1}


class CheckpointFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


def _str16(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<H", len(b)) + b


def _config_dict(model: ModelState) -> dict:
    cfg = model.backbone.config
    bb = {k: getattr(cfg, k) for k in cfg.__dataclass_fields__}
    bb["conv_kernels"] = [list(k) for k in cfg.conv_kernels]
    return {"backbone": bb, "adapters": model.adapter_config, "meta": model.meta}


def to_bytes(model: ModelState) -> bytes:
    head = bytearray(MAGIC + struct.pack("<IB", VERSION, MODEL_VARIANTS.index(model.variant)))
    head += struct.pack("<I", len(model.tasks))
    for t in model.tasks:
        head += struct.pack("<I", t.id) + _str16(t.name)
        head += struct.pack("<IBIdd", t.num_classes, _LOSS_CODES[t.loss], t.channels, t.duration_s, t.subsample_fraction)
    cfg = json.dumps(_config_dict(model), sort_keys=True, separators=(",", ":")).encode("utf-8")
    head += struct.pack("<I", len(cfg)) + cfg

    params = sorted(model.parameters().items())
    entries = []
    for name, p in params:
        entries.append(_str16(name) + struct.pack("<BB", DTYPE_F64, p.data.ndim) + struct.pack(f"<{p.data.ndim}Q", *p.data.shape))
    dir_size = 4 + sum(len(e) + 8 + 1 for e in entries)
    offset = len(head) + dir_size
    directory = bytearray(struct.pack("<I", len(params)))
    payload = bytearray()
    for (name, p), e in zip(params, entries):
        directory += e + struct.pack("<QB", offset, FLAG_FROZEN if p.frozen else 0)
        raw = np.ascontiguousarray(p.data, dtype="<f8").tobytes()
        payload += raw
        offset += len(raw)
    return bytes(head + directory + payload)


def save(model: ModelState, path) -> None:
    Path(path).write_bytes(to_bytes(model))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.buf):
            raise CheckpointFormatError("truncated file", self.pos)
        vals = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += size
        return vals

    def str16(self) -> str:
        (n,) = self.take("<H")
        if self.pos + n > len(self.buf):
            raise CheckpointFormatError("truncated string", self.pos)
        s = self.buf[self.pos : self.pos + n]
        self.pos += n
        try:
            return s.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointFormatError("invalid UTF-8 name", self.pos - n) from exc


def from_bytes(buf: bytes) -> ModelState:
    rd = _Reader(buf)
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise CheckpointFormatError(f"bad magic {bytes(buf[:4])!r}", 0)
    rd.pos = 4
    version, vcode = rd.take("<IB")
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported version {version}", 4)
    if vcode >= len(MODEL_VARIANTS):
        raise CheckpointFormatError(f"unknown variant code {vcode}", 8)
    variant = MODEL_VARIANTS[vcode]
    (n_tasks,) = rd.take("<I")
    losses = {v: k for k, v in _LOSS_CODES.items()}
    tasks = []
    for _ in range(n_tasks):
        (tid,) = rd.take("<I")
        name = rd.str16()
        k, lcode, ch, dur, frac = rd.take("<IBIdd")
        tasks.append(TaskSpec(tid, name, k, losses[lcode], ch, dur, frac))
    (clen,) = rd.take("<I")
    if rd.pos + clen > len(buf):
        raise CheckpointFormatError("truncated config block", rd.pos)
    cfg = json.loads(buf[rd.pos : rd.pos + clen].decode("utf-8"))
    rd.pos += clen

    bb = dict(cfg["backbone"])
    bb["conv_kernels"] = tuple(tuple(k) for k in bb["conv_kernels"])
    ad = cfg["adapters"]
    model = build_model(BackboneConfig(**bb), tasks, variant, r=ad.get("r", 8), locations=ad.get("locations", "both"),
                        n_experts=ad.get("n_experts"))
    model.meta = cfg.get("meta", {})
    params = model.parameters()

    (count,) = rd.take("<I")
    seen = set()
    for _ in range(count):
        entry_at = rd.pos
        name = rd.str16()
        dtype, rank = rd.take("<BB")
        if dtype != DTYPE_F64:
            raise CheckpointFormatError(f"unsupported dtype code {dtype}", entry_at)
        dims = rd.take(f"<{rank}Q")
        off, flags = rd.take("<QB")
        if name not in params:
            raise CheckpointFormatError(f"unexpected tensor {name!r}", entry_at)
        p = params[name]
        if tuple(dims) != p.shape:
            raise CheckpointFormatError(f"shape {dims} of {name!r} does not match model {p.shape}", entry_at)
        nbytes = 8 * int(np.prod(dims, dtype=np.int64))
        if off + nbytes > len(buf):
            raise CheckpointFormatError(f"payload of {name!r} truncated", len(buf))
        p.data[...] = np.frombuffer(buf, dtype="<f8", count=nbytes // 8, offset=off).reshape(dims)
        p.set_frozen(bool(flags & FLAG_FROZEN))
        seen.add(name)
    missing = set(params) - seen
    if missing:
        raise CheckpointFormatError(f"missing tensors {sorted(missing)[:3]}", rd.pos)
    return model


def load(path) -> ModelState:
    return from_bytes(Path(path).read_bytes())
