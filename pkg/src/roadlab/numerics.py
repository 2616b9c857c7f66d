"""Tensor arithmetic, seeded randomness and the TNSR binary tensor format.

Tensors are plain numpy arrays: float32 (or uint8 for raw sensor pixels),
C-contiguous, row-major. Arithmetic that reduces accumulates in float64 and
rounds back to float32.

TNSR layout (little-endian, no padding)::

    b"TNSR" | version u8 = 1 | dtype u8 (1 = f32, 2 = u8) | rank u8
    | rank x u32 extents | row-major payload
"""
from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, ShapeError

MAGIC = b"TNSR"
VERSION = 1
DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("u1")}
_CODE_FOR = {np.dtype("float32"): 1, np.dtype("uint8"): 2}
HEADER_FIXED = len(MAGIC) + 3


def as_tensor(x, dtype=np.float32) -> np.ndarray:
    """Coerce to a C-contiguous float32 tensor, rejecting NaN/Inf."""
    t = np.ascontiguousarray(x, dtype=dtype)
    if t.ndim == 0:
        t = t.reshape(1)
    if t.dtype.kind == "f" and not np.all(np.isfinite(t)):
        raise ShapeError("tensor contains NaN or Inf")
    return t


def matmul(a, b) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner extents differ: {a.shape} x {b.shape}")
    return (a.astype(np.float64) @ b.astype(np.float64)).astype(np.float32)


def _reduce(fn, t, axis):
    out = fn(np.asarray(t, dtype=np.float64), axis=axis)
    return np.float32(out) if np.ndim(out) == 0 else out.astype(np.float32)


def tsum(t, axis=None):
    return _reduce(np.sum, t, axis)


def tmean(t, axis=None):
    return _reduce(np.mean, t, axis)


# --------------------------------------------------------------------------- TNSR


def encode_tensor(t: np.ndarray) -> bytes:
    t = np.asarray(t)
    code = _CODE_FOR.get(t.dtype)
    if code is None:
        raise FormatError(f"unsupported dtype {t.dtype}; only float32 and uint8 are storable")
    if t.ndim == 0 or t.ndim > 255:
        raise FormatError(f"unsupported rank {t.ndim}")
    if any(d < 1 for d in t.shape):
        raise FormatError(f"extents must be >= 1, got {t.shape}")
    header = MAGIC + struct.pack("<BBB", VERSION, code, t.ndim)
    header += struct.pack(f"<{t.ndim}I", *t.shape)
    payload = np.ascontiguousarray(t, dtype=DTYPE_CODES[code]).tobytes(order="C")
    return header + payload


def decode_tensor(buf: bytes, source="<bytes>") -> np.ndarray:
    if len(buf) < HEADER_FIXED:
        raise FormatError(f"{source}: truncated header")
    if buf[:4] != MAGIC:
        raise FormatError(f"{source}: bad magic {buf[:4]!r}")
    version, code, rank = struct.unpack_from("<BBB", buf, 4)
    if version != VERSION:
        raise FormatError(f"{source}: unsupported version {version}")
    if code not in DTYPE_CODES:
        raise FormatError(f"{source}: unsupported dtype code {code}")
    if rank == 0:
        raise FormatError(f"{source}: rank 0")
    off = HEADER_FIXED + 4 * rank
    if len(buf) < off:
        raise FormatError(f"{source}: truncated extents")
    dims = struct.unpack_from(f"<{rank}I", buf, HEADER_FIXED)
    if any(d == 0 for d in dims):
        raise FormatError(f"{source}: zero extent in {dims}")
    dtype = DTYPE_CODES[code]
    nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(buf) - off != nbytes:
        raise FormatError(f"{source}: payload has {len(buf) - off} bytes, expected {nbytes}")
    arr = np.frombuffer(buf, dtype=dtype, count=nbytes // dtype.itemsize, offset=off)
    return arr.reshape(dims).astype(dtype.newbyteorder("="), copy=True)


def save_tensor(t, path) -> None:
    data = encode_tensor(t)
    path = Path(path)
    tmp = path.with_name(path.name + ".part")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    return decode_tensor(buf, source=str(path))


# --------------------------------------------------------------------------- RNG


class Rng:
    """Seeded generator backed by numpy's PCG64 bit generator.

    PCG64's raw stream is fixed by numpy for a given seed on every platform.
    Children are derived with ``SeedSequence.spawn`` so parallel work never
    shares a stream.
    """

    def __init__(self, seed: int | np.random.SeedSequence):
        if isinstance(seed, np.random.SeedSequence):
            self._seq = seed
        else:
            if int(seed) < 0:
                raise ValueError("seed must be non-negative")
            self._seq = np.random.SeedSequence(int(seed))
        self.gen = np.random.Generator(np.random.PCG64(self._seq))

    def spawn(self, n: int) -> list["Rng"]:
        return [Rng(s) for s in self._seq.spawn(n)]

    def child(self, key: int) -> "Rng":
        """Deterministic child keyed by an integer, independent of call order."""
        entropy = self._seq.entropy
        path = tuple(self._seq.spawn_key) + (int(key),)
        return Rng(np.random.SeedSequence(entropy, spawn_key=path))

    def seed(self) -> int:
        """A 63-bit integer seed drawn from this generator's seed sequence (no stream consumed)."""
        lo, hi = (int(v) for v in self._seq.generate_state(2, np.uint32))
        return (lo | hi << 32) >> 1

    def raw(self, n: int) -> np.ndarray:
        return self.gen.bit_generator.random_raw(n)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size)

    def random(self, size=None):
        return self.gen.random(size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def permutation(self, n):
        return self.gen.permutation(n)


def derive_seed(master: int, *keys: int) -> int:
    """Integer seed for the sub-task addressed by ``keys`` under ``master``."""
    return Rng(np.random.SeedSequence(int(master), spawn_key=tuple(int(k) for k in keys))).seed()
