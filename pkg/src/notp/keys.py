"""Secret bit buffers and the NOPK key file format.

Key file layout (all integers little-endian)::

    magic      4 bytes   b"NOPK"
    version    1 byte    0x01
    flags      1 byte    hash algorithm id (0x01 = SHA-256)
    bit_length 8 bytes   unsigned
    payload    ceil(bit_length / 8) bytes, bits packed MSB first
    digest     32 bytes  hash of header + payload

Key files should be readable by their owner only; :func:`write_key_file`
creates them with mode 0o400.
"""

from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

KEY_MAGIC = b"NOPK"
KEY_VERSION = 0x01
HASH_SHA256 = 0x01
_HEADER = struct.Struct("<4sBBQ")
DIGEST_SIZE = 32


class KeyStarvation(RuntimeError):
    """Not enough unspent key material; keys are never reused."""


class KeyFileError(ValueError):
    """Malformed key file or failed integrity check."""


def as_bits(bits) -> np.ndarray:
    arr = np.asarray(bits, dtype=np.uint8).ravel()
    if arr.size and arr.max() > 1:
        raise ValueError("bits must be 0 or 1")
    return arr


def pack_bits(bits) -> bytes:
    return np.packbits(as_bits(bits)).tobytes()


def unpack_bits(data: bytes, nbits: int) -> np.ndarray:
    if len(data) * 8 < nbits:
        raise ValueError("not enough bytes for requested bit length")
    return np.unpackbits(np.frombuffer(data, dtype=np.uint8))[:nbits].astype(np.uint8)


@dataclass
class KeyBuffer:
    """Ordered secret bits with a one-way consumption watermark.

    Bits before ``watermark`` are spent and are never handed out again.
    """

    bits: np.ndarray
    origin: str = "K0"
    watermark: int = 0
    # set when the buffer holds the genesis key; blocks serialization helpers
    genesis: bool = field(default=False, repr=False)

    def __post_init__(self):
        self.bits = as_bits(self.bits).copy()
        if not 0 <= self.watermark <= len(self.bits):
            raise ValueError("watermark out of range")

    def __len__(self) -> int:
        return int(self.bits.size)

    @property
    def remaining(self) -> int:
        return len(self) - self.watermark

    def unspent(self) -> np.ndarray:
        return self.bits[self.watermark:].copy()

    def take(self, n: int) -> np.ndarray:
        """Consume and return the next ``n`` unspent bits."""
        if n < 0:
            raise ValueError("negative take")
        if n > self.remaining:
            raise KeyStarvation(
                f"{self.origin}: {n} bits requested, {self.remaining} unspent"
            )
        out = self.bits[self.watermark:self.watermark + n].copy()
        self.watermark += n
        return out

    def extend(self, bits) -> None:
        """Append fresh bits after the unspent tail (spent prefix is dropped)."""
        self.bits = np.concatenate([self.bits[self.watermark:], as_bits(bits)])
        self.watermark = 0

    def copy(self) -> "KeyBuffer":
        return KeyBuffer(self.bits, self.origin, self.watermark, self.genesis)

    def digest(self) -> bytes:
        return hashlib.sha256(struct.pack("<Q", len(self)) + pack_bits(self.bits)).digest()

    def __eq__(self, other):
        if not isinstance(other, KeyBuffer):
            return NotImplemented
        return np.array_equal(self.bits, other.bits) and self.watermark == other.watermark

    @classmethod
    def from_bytes(cls, data: bytes, nbits: int | None = None, origin: str = "K0") -> "KeyBuffer":
        nbits = len(data) * 8 if nbits is None else nbits
        return cls(unpack_bits(data, nbits), origin)


def encode_key_file(bits) -> bytes:
    bits = as_bits(bits)
    header = _HEADER.pack(KEY_MAGIC, KEY_VERSION, HASH_SHA256, bits.size)
    body = header + pack_bits(bits)
    return body + hashlib.sha256(body).digest()


def decode_key_file(data: bytes) -> np.ndarray:
    if len(data) < _HEADER.size + DIGEST_SIZE:
        raise KeyFileError("key file truncated")
    magic, version, flags, nbits = _HEADER.unpack_from(data)
    if magic != KEY_MAGIC:
        raise KeyFileError("bad key file magic")
    if version != KEY_VERSION:
        raise KeyFileError(f"unsupported key file version {version}")
    if flags != HASH_SHA256:
        raise KeyFileError(f"unknown hash algorithm id {flags:#04x}")
    payload_len = (nbits + 7) // 8
    expected = _HEADER.size + payload_len + DIGEST_SIZE
    if len(data) != expected:
        raise KeyFileError(f"key file size {len(data)} != expected {expected}")
    body, digest = data[:-DIGEST_SIZE], data[-DIGEST_SIZE:]
    if hashlib.sha256(body).digest() != digest:
        raise KeyFileError("key file digest mismatch")
    return unpack_bits(body[_HEADER.size:], nbits)


def key_id(data: bytes) -> bytes:
    """Public identifier of a key file: SHA-256 over its full contents."""
    return hashlib.sha256(data).digest()


def write_key_file(path, bits, overwrite: bool = False) -> bytes:
    """Write ``bits`` as a NOPK file (mode 0o400) and return its key id."""
    path = Path(path)
    data = encode_key_file(bits)
    if path.exists():
        if not overwrite:
            raise FileExistsError(f"{path} exists")
        path.unlink()
    fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_EXCL, 0o400)
    with os.fdopen(fd, "wb") as fh:
        fh.write(data)
    return key_id(data)


def read_key_file(path, origin: str = "K0") -> tuple[KeyBuffer, bytes]:
    """Load a key file, returning the buffer and its key id."""
    data = Path(path).read_bytes()
    return KeyBuffer(decode_key_file(data), origin), key_id(data)
