"""Ternary evolution vectors and their 2-bit packing.

Trit codes: 0 -> 0b00, +1 -> 0b01, -1 -> 0b11; 0b10 is reserved and
marks a corrupt buffer. Four trits share a byte, the first one in the two
most significant bits. Unused tail slots are 0b00.
"""

import struct
from dataclasses import dataclass

import numpy as np


class TernaryError(ValueError):
    pass


class CorruptEncodingError(TernaryError):
    pass


def _same_length(*vectors):
    arrays = [np.asarray(v, dtype=np.float64) for v in vectors]
    if len({a.shape for a in arrays}) != 1 or arrays[0].ndim != 1:
        raise TernaryError("length mismatch: " + ", ".join(str(a.shape) for a in arrays))
    return arrays


def ternary_first_epoch(local, initial, alpha):
    """Trits of the first epoch: a dead zone of half-width ``alpha`` (inclusive)."""
    local, initial = _same_length(local, initial)
    diff = local - initial
    out = np.zeros(diff.shape, dtype=np.int8)
    out[diff > alpha] = 1
    out[diff < -alpha] = -1
    return out


def ternary_subsequent(local, prev, prev2, beta):
    """Trits from the second epoch on.

    A parameter is zero when its move away from ``prev`` is strictly smaller
    than ``beta`` times the master's previous step; otherwise the trit is the
    sign of (move x previous step), with sign(0) = 0.
    """
    local, prev, prev2 = _same_length(local, prev, prev2)
    move = local - prev
    step = prev - prev2
    # sign of the product without the underflow of forming it
    out = (np.sign(move) * np.sign(step)).astype(np.int8)
    out[np.abs(move) < beta * np.abs(step)] = 0
    return out


_DECODE = np.array([0, 1, 0, -1], dtype=np.int8)


@dataclass(frozen=True)
class PackedTernary:
    buffer: bytes
    m: int

    def __post_init__(self):
        if self.m < 0 or len(self.buffer) != (self.m + 3) // 4:
            raise TernaryError(f"{len(self.buffer)} bytes cannot hold exactly {self.m} trits")

    def to_wire(self):
        return struct.pack("<Q", self.m) + self.buffer

    @classmethod
    def from_wire(cls, payload):
        payload = bytes(payload)
        if len(payload) < 8:
            raise TernaryError("ternary payload shorter than its length header")
        (m,) = struct.unpack_from("<Q", payload)
        return cls(payload[8:], m)

    @property
    def wire_size(self):
        return 8 + len(self.buffer)


def pack(trits):
    t = np.asarray(trits)
    if t.ndim != 1 or not np.all(np.isin(t, (-1, 0, 1))):
        raise TernaryError("trits must be a 1-D vector over {-1, 0, 1}")
    m = t.shape[0]
    codes = np.zeros(((m + 3) // 4) * 4, dtype=np.uint8)
    codes[:m] = np.where(t == -1, 0b11, t.astype(np.int64)).astype(np.uint8)
    codes = codes.reshape(-1, 4)
    packed = (codes[:, 0] << 6) | (codes[:, 1] << 4) | (codes[:, 2] << 2) | codes[:, 3]
    return PackedTernary(packed.astype(np.uint8).tobytes(), m)


def unpack(packed):
    raw = np.frombuffer(packed.buffer, dtype=np.uint8)
    codes = np.stack([(raw >> s) & 0b11 for s in (6, 4, 2, 0)], axis=1).reshape(-1)
    bad = np.flatnonzero(codes == 0b10)
    if bad.size:
        raise CorruptEncodingError(f"reserved code 0b10 at trit {bad[0]} (byte {bad[0] // 4})")
    if np.any(codes[packed.m :]):
        raise CorruptEncodingError("non-zero padding after the last trit")
    return _DECODE[codes[: packed.m]]
