"""Randomness sources standing in for the physical random generator.

Two independent kinds of draw are needed: unbiased random bits and
continuous Gaussian noise.  Every source accounts for the draws it hands out
and can be given a hard limit, so running dry is an error instead of a
silent reuse of old material.
"""

from __future__ import annotations

import os
from abc import ABC, abstractmethod

import numpy as np
from scipy.special import ndtri


class EntropyExhausted(RuntimeError):
    """Raised when a source with a draw limit has nothing left to give."""


class EntropyStream(ABC):
    """Abstract source of bits, bytes and standard-normal variates.

    Parameters
    ----------
    limit : int, optional
        Maximum number of draws (bits + normals + bytes) this stream may
        serve.  ``None`` means unlimited.
    """

    def __init__(self, limit: int | None = None):
        self.limit = limit
        self.used = 0

    def _charge(self, n: int) -> None:
        if n < 0:
            raise ValueError("negative draw count")
        if self.limit is not None and self.used + n > self.limit:
            raise EntropyExhausted(
                f"entropy stream exhausted: {self.used} used, {n} requested, limit {self.limit}"
            )
        self.used += n

    def bits(self, n: int) -> np.ndarray:
        """Return ``n`` independent unbiased bits as a ``uint8`` array of 0/1."""
        self._charge(n)
        return self._bits(n)

    def normals(self, n: int) -> np.ndarray:
        """Return ``n`` independent standard-normal draws."""
        self._charge(n)
        return self._normals(n)

    def random_bytes(self, n: int) -> bytes:
        self._charge(n)
        return self._bytes(n)

    @abstractmethod
    def _bits(self, n: int) -> np.ndarray: ...

    @abstractmethod
    def _normals(self, n: int) -> np.ndarray: ...

    @abstractmethod
    def _bytes(self, n: int) -> bytes: ...


class SystemEntropy(EntropyStream):
    """Live source backed by the operating system CSPRNG (``os.urandom``).

    Normals are produced by inverse-CDF transform of 53-bit uniforms, so no
    deterministic generator state sits between the OS and the caller.
    """

    def _bits(self, n):
        raw = np.frombuffer(os.urandom((n + 7) // 8), dtype=np.uint8)
        return np.unpackbits(raw)[:n].astype(np.uint8)

    def _normals(self, n):
        raw = np.frombuffer(os.urandom(8 * n), dtype=np.uint64)
        # (k + 0.5) / 2**53 keeps u strictly inside (0, 1)
        u = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) / float(1 << 53)
        return ndtri(u)

    def _bytes(self, n):
        return os.urandom(n)


class SeededEntropy(EntropyStream):
    """Reproducible source for tests and ``--seed`` runs.

    Parameters
    ----------
    seed : int or sequence of int
        Master seed.
    limit : int, optional
        Draw limit, see :class:`EntropyStream`.
    """

    def __init__(self, seed, limit: int | None = None, *, _seed_seq=None):
        super().__init__(limit)
        self.seed = seed
        self._seq = _seed_seq if _seed_seq is not None else np.random.SeedSequence(seed)
        self._rng = np.random.Generator(np.random.PCG64(self._seq))

    def spawn(self, index: int, limit: int | None = None) -> "SeededEntropy":
        """Independent sub-stream derived from the master seed by ``index``.

        The result only depends on the seed and the index, never on how much
        of the parent stream was consumed, so parallel workers stay
        reproducible regardless of scheduling.
        """
        seq = np.random.SeedSequence(
            self._seq.entropy, spawn_key=tuple(self._seq.spawn_key) + (int(index),)
        )
        return SeededEntropy(self.seed, limit, _seed_seq=seq)

    def _bits(self, n):
        return self._rng.integers(0, 2, size=n, dtype=np.uint8)

    def _normals(self, n):
        return self._rng.standard_normal(n)

    def _bytes(self, n):
        return self._rng.bytes(n)


class CompositeEntropy(EntropyStream):
    """Routes bit draws and noise draws to two separate sources.

    Mirrors a generator split into a binary part and a continuous-noise part;
    useful when the same key bits must be re-sent under fresh noise.
    """

    def __init__(self, bit_source: EntropyStream, noise_source: EntropyStream):
        super().__init__(None)
        self.bit_source = bit_source
        self.noise_source = noise_source

    def bits(self, n):
        return self.bit_source.bits(n)

    def random_bytes(self, n):
        return self.bit_source.random_bytes(n)

    def normals(self, n):
        return self.noise_source.normals(n)

    def _bits(self, n):  # pragma: no cover - routed above
        raise NotImplementedError

    _normals = _bytes = _bits


def make_entropy(seed=None) -> EntropyStream:
    """Seeded stream when ``seed`` is given, otherwise the live OS source."""
    if seed is None:
        return SystemEntropy()
    return SeededEntropy(seed)
