import os
import stat

import numpy as np
import pytest

from notp.entropy import CompositeEntropy, EntropyExhausted, SeededEntropy, SystemEntropy, make_entropy
from notp.keys import (KeyBuffer, KeyFileError, KeyStarvation, decode_key_file, encode_key_file, key_id,
                       pack_bits, read_key_file, unpack_bits, write_key_file)


def test_pack_bits_msb_first():
    assert pack_bits([1, 0, 0, 0, 0, 0, 0, 1, 1]) == bytes([0x81, 0x80])
    assert np.array_equal(unpack_bits(bytes([0x81, 0x80]), 9), [1, 0, 0, 0, 0, 0, 0, 1, 1])


def test_key_file_size_and_roundtrip():
    bits = SeededEntropy(1).bits(1024)
    data = encode_key_file(bits)
    assert len(data) == 4 + 1 + 1 + 8 + 128 + 32
    assert np.array_equal(decode_key_file(data), bits)


def test_key_file_odd_length():
    bits = SeededEntropy(1).bits(77)
    assert np.array_equal(decode_key_file(encode_key_file(bits)), bits)


@pytest.mark.parametrize("offset,match", [(0, "magic"), (4, "version"), (5, "hash"), (20, "digest")])
def test_key_file_corruption(offset, match):
    data = bytearray(encode_key_file(SeededEntropy(1).bits(128)))
    data[offset] ^= 0x01
    with pytest.raises(KeyFileError, match=match):
        decode_key_file(bytes(data))


def test_key_file_size_mismatch():
    data = encode_key_file(SeededEntropy(1).bits(128))
    with pytest.raises(KeyFileError):
        decode_key_file(data + b"\x00")
    with pytest.raises(KeyFileError):
        decode_key_file(data[:10])


def test_write_key_file_permissions_and_overwrite(tmp_path):
    path = tmp_path / "k.nopk"
    bits = SeededEntropy(3).bits(256)
    kid = write_key_file(path, bits)
    assert stat.S_IMODE(os.stat(path).st_mode) == 0o400
    buf, kid2 = read_key_file(path)
    assert kid == kid2 == key_id(path.read_bytes())
    assert np.array_equal(buf.bits, bits)
    with pytest.raises(FileExistsError):
        write_key_file(path, bits)
    write_key_file(path, SeededEntropy(4).bits(256), overwrite=True)
    assert read_key_file(path)[1] != kid


def test_key_buffer_take_and_starvation():
    k = KeyBuffer(np.array([1, 0, 1, 1], np.uint8))
    assert list(k.take(3)) == [1, 0, 1]
    assert k.remaining == 1
    with pytest.raises(KeyStarvation):
        k.take(2)
    assert k.remaining == 1  # failed take spends nothing


def test_key_buffer_extend_drops_spent_prefix():
    k = KeyBuffer(np.array([1, 0, 1], np.uint8))
    k.take(2)
    k.extend([0, 0])
    assert list(k.unspent()) == [1, 0, 0]
    assert k.watermark == 0


def test_key_buffer_rejects_non_bits():
    with pytest.raises(ValueError):
        KeyBuffer(np.array([0, 2], np.uint8))


def test_seeded_entropy_reproducible_and_spawn_independent():
    a, b = SeededEntropy(5), SeededEntropy(5)
    assert np.array_equal(a.bits(100), b.bits(100))
    parent = SeededEntropy(5)
    parent.bits(1000)
    assert np.array_equal(parent.spawn(3).bits(64), SeededEntropy(5).spawn(3).bits(64))
    assert not np.array_equal(SeededEntropy(5).spawn(1).bits(64), SeededEntropy(5).spawn(2).bits(64))


def test_entropy_limit():
    e = SeededEntropy(1, limit=10)
    e.bits(8)
    with pytest.raises(EntropyExhausted):
        e.bits(3)


def test_composite_routes_sources():
    c1 = CompositeEntropy(SeededEntropy(1), SeededEntropy(2))
    c2 = CompositeEntropy(SeededEntropy(1), SeededEntropy(3))
    assert np.array_equal(c1.bits(50), c2.bits(50))
    assert not np.array_equal(c1.normals(50), c2.normals(50))


def test_system_entropy_shapes():
    e = make_entropy()
    assert isinstance(e, SystemEntropy)
    assert e.bits(10).size == 10 and len(e.random_bytes(7)) == 7
    assert e.normals(1000).std() == pytest.approx(1.0, abs=0.15)
