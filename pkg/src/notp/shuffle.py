"""Keyed permutation family used to hide bit positions from a known-plaintext attacker.

A short secret selector (``n_b`` bits) picks one member of a family of
``2**n_b`` permutations.  The family is defined by a shared 32-byte list
seed; members are generated on demand by a Fisher-Yates shuffle driven by a
SHAKE-256 stream, so the list never has to be stored.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

MIN_SELECTOR_BITS = 16
DEFAULT_SELECTOR_BITS = 32


@dataclass(frozen=True)
class ShuffleConfig:
    selector_bits: int = DEFAULT_SELECTOR_BITS
    list_seed: bytes = bytes(32)
    enabled: bool = True

    def __post_init__(self):
        if self.enabled and not MIN_SELECTOR_BITS <= self.selector_bits <= 64:
            raise ValueError(f"selector_bits must be in [{MIN_SELECTOR_BITS}, 64]")
        if len(self.list_seed) != 32:
            raise ValueError("list_seed must be 32 bytes")

    @property
    def family_size(self) -> int:
        return 1 << self.selector_bits

    @property
    def guess_probability(self) -> float:
        """Chance ``p_d`` that a blind guess hits the selected permutation."""
        return 2.0 ** -self.selector_bits

    @classmethod
    def disabled(cls) -> "ShuffleConfig":
        return cls(0, bytes(32), False)


class WordStream:
    """Unbounded little-endian 32-bit words from SHAKE-256 of ``seed``."""

    def __init__(self, seed: bytes):
        self._seed = seed
        self._buf = b""
        self._pos = 0

    def next(self) -> int:
        if self._pos + 4 > len(self._buf):
            # SHAKE output of length n is a prefix of any longer output
            self._buf = hashlib.shake_256(self._seed).digest(max(4096, 2 * len(self._buf)))
        (w,) = struct.unpack_from("<I", self._buf, self._pos)
        self._pos += 4
        return w

    def below(self, bound: int) -> int:
        """Uniform integer in ``[0, bound)`` by rejection, for ``bound <= 2**32``."""
        limit = (1 << 32) - (1 << 32) % bound
        w = self.next()
        while w >= limit:
            w = self.next()
        return w % bound


def select_permutation(selector: int, list_seed: bytes, length: int,
                       selector_bits: int | None = None) -> np.ndarray:
    """Permutation of ``range(length)`` chosen by ``selector`` from the keyed family.

    Applying it as ``shuffled = bits[perm]`` and undoing it with
    ``bits[perm] = shuffled`` round-trips.
    """
    if length < 1:
        raise ValueError("length must be positive")
    if selector < 0 or (selector_bits is not None and selector >= 1 << selector_bits):
        raise ValueError("selector out of range")
    seed = b"notp-shuffle\x00" + bytes(list_seed) + struct.pack("<QQ", selector, length)
    words = WordStream(seed)
    perm = list(range(length))
    for i in range(length - 1, 0, -1):
        j = words.below(i + 1)
        perm[i], perm[j] = perm[j], perm[i]
    return np.asarray(perm, dtype=np.int64)


def invert(perm: np.ndarray) -> np.ndarray:
    inv = np.empty_like(perm)
    inv[perm] = np.arange(perm.size)
    return inv


def selector_from_bits(bits) -> int:
    """Big-endian integer value of a bit array."""
    value = 0
    for b in np.asarray(bits, dtype=np.uint8):
        value = (value << 1) | int(b)
    return value
