"""Deterministic 64-bit mixing, key derivation, and integer packing helpers.

Everything downstream (PRP keys, cell masks, nonces) is derived from a single
64-bit run seed through splitmix64 chains, so a run is fully reproducible.
"""
from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1

_SM_GAMMA = 0x9E3779B97F4A7C15
_SM_M1 = 0xBF58476D1CE4E5B9
_SM_M2 = 0x94D049BB133111EB


def splitmix64(x: int) -> int:
    x = (x + _SM_GAMMA) & MASK64
    x = ((x ^ (x >> 30)) * _SM_M1) & MASK64
    x = ((x ^ (x >> 27)) * _SM_M2) & MASK64
    return x ^ (x >> 31)


def splitmix64_np(x: np.ndarray) -> np.ndarray:
    """Vectorised splitmix64 over a uint64 array (wrapping arithmetic)."""
    x = x.astype(np.uint64, copy=True)
    with np.errstate(over="ignore"):
        x += np.uint64(_SM_GAMMA)
        x = (x ^ (x >> np.uint64(30))) * np.uint64(_SM_M1)
        x = (x ^ (x >> np.uint64(27))) * np.uint64(_SM_M2)
    return x ^ (x >> np.uint64(31))


def derive(seed: int, *labels) -> int:
    """Derive a 64-bit subkey from seed and a label path."""
    x = splitmix64(seed & MASK64)
    for lab in labels:
        if isinstance(lab, str):
            for b in lab.encode():
                x = splitmix64(x ^ b)
        else:
            x = splitmix64(x ^ (int(lab) & MASK64))
    return x


def to_u64(v: int) -> int:
    """Two's-complement encode a signed word."""
    return v & MASK64


def from_u64(v: int) -> int:
    v &= MASK64
    return v - (1 << 64) if v >= (1 << 63) else v


def zigzag(v: int) -> int:
    return (v << 1) ^ (v >> 63) if -(1 << 62) <= v < (1 << 62) else _zigzag_big(v)


def _zigzag_big(v: int) -> int:
    return v * 2 if v >= 0 else -v * 2 - 1


def unzigzag(v: int) -> int:
    return (v >> 1) if (v & 1) == 0 else -((v + 1) >> 1)


def pack_ints(values: tuple[int, ...]) -> int:
    """Pack a tuple of non-negative ints into one self-delimiting big int."""
    buf = bytearray()
    for v in values:
        b = v.to_bytes((v.bit_length() + 7) // 8 or 1, "big")
        if len(b) >= 255:
            buf.append(255)
            buf += len(b).to_bytes(4, "big")
        else:
            buf.append(len(b))
        buf += b
    return int.from_bytes(bytes([1]) + bytes(buf), "big")


def unpack_ints(packed: int) -> tuple[int, ...]:
    raw = packed.to_bytes((packed.bit_length() + 7) // 8, "big")
    assert raw[0] == 1, "corrupt packed tuple"
    out = []
    i = 1
    while i < len(raw):
        ln = raw[i]
        i += 1
        if ln == 255:
            ln = int.from_bytes(raw[i:i + 4], "big")
            i += 4
        out.append(int.from_bytes(raw[i:i + ln], "big"))
        i += ln
    return tuple(out)
