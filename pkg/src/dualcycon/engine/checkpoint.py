"""PDCK checkpoint files.

Layout (little-endian)::

    b"PDCK"  u16 version  u64 seed  i32 fold
    u32 meta_len, meta_len bytes of UTF-8 JSON (model config, scores, ...)
    u32 n_blobs, then per blob:
        u16 name_len, name (UTF-8), u8 ndim, ndim x u32 dims, float64 data
    u32 n_opt, then per optimizer entry:
        u16 name_len, name, u64 step, m blob data, v blob data
        (m and v share the shape of the parameter blob with the same name)
"""

import json
import struct
from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np

from ..errors import BadMagic, TruncatedPayload

MAGIC = b"PDCK"
VERSION = 1


@dataclass
class Checkpoint:
    blobs: Dict[str, np.ndarray]
    optimizer: Dict[str, Tuple[int, np.ndarray, np.ndarray]] = field(default_factory=dict)
    seed: int = 0
    fold: int = -1
    meta: dict = field(default_factory=dict)


def _pack_name(name):
    raw = name.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def save_checkpoint(path, ckpt: Checkpoint):
    out = [MAGIC, struct.pack("<HQi", VERSION, ckpt.seed, ckpt.fold)]
    meta = json.dumps(ckpt.meta, sort_keys=True).encode("utf-8")
    out.append(struct.pack("<I", len(meta)) + meta)
    out.append(struct.pack("<I", len(ckpt.blobs)))
    for name, arr in ckpt.blobs.items():
        arr = np.asarray(arr, dtype="<f8")
        out.append(_pack_name(name))
        out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr).tobytes())
    out.append(struct.pack("<I", len(ckpt.optimizer)))
    for name, (step, m, v) in ckpt.optimizer.items():
        out.append(_pack_name(name) + struct.pack("<Q", step))
        out.append(np.ascontiguousarray(m, dtype="<f8").tobytes())
        out.append(np.ascontiguousarray(v, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(out))


class _Reader:
    def __init__(self, buf):
        self.buf, self.off = buf, 0

    def take(self, fmt):
        s = struct.Struct(fmt)
        if self.off + s.size > len(self.buf):
            raise TruncatedPayload("checkpoint truncated")
        vals = s.unpack_from(self.buf, self.off)
        self.off += s.size
        return vals

    def raw(self, n):
        if self.off + n > len(self.buf):
            raise TruncatedPayload("checkpoint truncated")
        b = self.buf[self.off:self.off + n]
        self.off += n
        return b

    def name(self):
        (n,) = self.take("<H")
        return self.raw(n).decode("utf-8")

    def array(self, shape):
        count = int(np.prod(shape, dtype=np.int64))
        return np.frombuffer(self.raw(8 * count), "<f8").reshape(shape).astype(np.float64)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.raw(4) != MAGIC:
        raise BadMagic(f"{path}: not a PDCK checkpoint")
    version, seed, fold = r.take("<HQi")
    if version != VERSION:
        raise BadMagic(f"{path}: unsupported checkpoint version {version}")
    (meta_len,) = r.take("<I")
    meta = json.loads(r.raw(meta_len).decode("utf-8"))
    blobs = {}
    (n_blobs,) = r.take("<I")
    for _ in range(n_blobs):
        name = r.name()
        (ndim,) = r.take("<B")
        shape = r.take(f"<{ndim}I") if ndim else ()
        blobs[name] = r.array(tuple(shape))
    optimizer = {}
    (n_opt,) = r.take("<I")
    for _ in range(n_opt):
        name = r.name()
        (step,) = r.take("<Q")
        shape = blobs[name].shape
        optimizer[name] = (step, r.array(shape), r.array(shape))
    if r.off != len(r.buf):
        raise TruncatedPayload(f"{path}: {len(r.buf) - r.off} trailing bytes")
    return Checkpoint(blobs, optimizer, seed, fold, meta)
