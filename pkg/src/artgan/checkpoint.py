"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"ARTGAN01"
    config   : K u32, d u32, width numerator u64, width denominator u64,
               image_size u32, leaky_alpha f64
    counters : epoch u64, step u64
    5 tensor sections, in order theta_G, theta_D, batchnorm buffers,
               RMSProp accumulators of G, RMSProp accumulators of D;
               each section: count u32, then per tensor
               name length u32, name utf-8, rank u32, extents u32 * rank,
               raw float64 data
    optimizer scalars, G then D: steps u64, lr f64, rho f64, eps f64
    rng      : seed u64, PCG64 state u128, increment u128, has_uint32 u8,
               uinteger u32
    b"END."

Parameters shared between the reconstruction path and the networks are
stored once, under their owning network.
"""
from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .model import ModelConfig

MAGIC = b"ARTGAN01"
TRAILER = b"END."
SECTIONS = ("theta_G", "theta_D", "buffers", "optim_G", "optim_D")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    epoch: int
    step: int
    tensors: dict[str, dict[str, np.ndarray]]
    optim_scalars: dict[str, tuple[int, float, float, float]]
    rng_seed: int
    rng_state: tuple[int, int, int, int]
    extra: dict = field(default_factory=dict)


def _u128(value):
    return int(value).to_bytes(16, "little")


def _write_tensors(f, tensors):
    f.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        f.write(struct.pack("<I", len(raw)))
        f.write(raw)
        f.write(struct.pack("<I", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def encode(ck: Checkpoint) -> bytes:
    f = io.BytesIO()
    c = ck.config
    f.write(MAGIC)
    w = Fraction(c.width_mult)
    f.write(struct.pack("<IIQQId", c.K, c.d, w.numerator, w.denominator, c.image_size, c.leaky_alpha))
    f.write(struct.pack("<QQ", ck.epoch, ck.step))
    for section in SECTIONS:
        _write_tensors(f, ck.tensors[section])
    for which in ("G", "D"):
        f.write(struct.pack("<Qddd", *ck.optim_scalars[which]))
    s, inc, has, uint = ck.rng_state
    f.write(struct.pack("<Q", ck.rng_seed))
    f.write(_u128(s) + _u128(inc))
    f.write(struct.pack("<BI", has, uint))
    f.write(TRAILER)
    return f.getvalue()


class _Reader:
    def __init__(self, data):
        self.data, self.pos = data, 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CheckpointError(f"checkpoint truncated at byte {self.pos} (needed {n} more)")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(data: bytes) -> Checkpoint:
    r = _Reader(data)
    magic = r.take(len(MAGIC))
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}; expected {MAGIC!r}")
    K, d, num, den, image_size, alpha = r.unpack("<IIQQId")
    epoch, step = r.unpack("<QQ")
    tensors = {}
    for section in SECTIONS:
        (count,) = r.unpack("<I")
        entries = {}
        for _ in range(count):
            (n,) = r.unpack("<I")
            name = r.take(n).decode("utf-8")
            (rank,) = r.unpack("<I")
            shape = r.unpack(f"<{rank}I")
            size = int(np.prod(shape)) if rank else 1
            arr = np.frombuffer(r.take(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
            entries[name] = arr
        tensors[section] = entries
    scalars = {}
    for which in ("G", "D"):
        steps, lr, rho, eps = r.unpack("<Qddd")
        scalars[which] = (steps, lr, rho, eps)
    (seed,) = r.unpack("<Q")
    s = int.from_bytes(r.take(16), "little")
    inc = int.from_bytes(r.take(16), "little")
    has, uint = r.unpack("<BI")
    if r.take(len(TRAILER)) != TRAILER:
        raise CheckpointError("missing end marker")
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes after end marker")
    try:
        config = ModelConfig(K=K, d=d, width_mult=Fraction(num, den), image_size=image_size, leaky_alpha=alpha)
    except (ValueError, ZeroDivisionError) as e:
        raise CheckpointError(f"invalid model config in checkpoint: {e}") from None
    return Checkpoint(config, epoch, step, tensors, scalars, seed, (s, inc, has, uint))


def save(path, ck: Checkpoint):
    """Write atomically: a temp file in the same directory, then rename."""
    data = encode(ck)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def load(path) -> Checkpoint:
    with open(path, "rb") as f:
        return decode(f.read())


def check_compatible(expected: dict[str, dict[str, np.ndarray]], found: dict[str, dict[str, np.ndarray]]):
    """Raise on the first missing, extra or differently shaped tensor."""
    for section in SECTIONS:
        exp, got = expected[section], found[section]
        for name, arr in exp.items():
            if name not in got:
                raise CheckpointError(f"{section}: tensor {name} missing from checkpoint")
            if got[name].shape != arr.shape:
                raise CheckpointError(f"{section}: shape mismatch for {name}: checkpoint has "
                                      f"{got[name].shape}, model expects {arr.shape}")
        extra = [n for n in got if n not in exp]
        if extra:
            raise CheckpointError(f"{section}: unexpected tensor {extra[0]} in checkpoint")
