import struct

import numpy as np
import pytest

from kernelnorm.serialize import (HEADER, MAGIC, FormatError, from_bytes, load_tensor, save_tensor,
                                  to_bytes)


@pytest.mark.parametrize("dtype", [np.float32, np.float64, np.uint8, np.uint16, np.int64])
@pytest.mark.parametrize("shape", [(5,), (2, 3), (2, 1, 4), (2, 3, 4, 5)])
def test_round_trip(dtype, shape):
    a = (np.random.default_rng(0).standard_normal(shape) * 50).astype(dtype)
    b = from_bytes(to_bytes(a))
    assert b.dtype == a.dtype and b.shape == a.shape
    assert np.array_equal(a, b)


def test_header_layout():
    buf = to_bytes(np.arange(6, dtype=np.float32).reshape(2, 3))
    assert HEADER.size == 24
    assert buf[:4] == MAGIC
    assert buf[4] == 1 and buf[5] == 2
    assert struct.unpack_from("<4I", buf, 8) == (2, 3, 1, 1)
    assert len(buf) == 24 + 6 * 4
    assert np.frombuffer(buf[24:], "<f4").tolist() == [0, 1, 2, 3, 4, 5]


def test_big_endian_input_written_little_endian():
    a = np.arange(4, dtype=">f8")
    assert np.array_equal(from_bytes(to_bytes(a)), a)
    assert from_bytes(to_bytes(a)).dtype == np.dtype("<f8")


def test_non_contiguous_input():
    a = np.arange(24, dtype=np.float64).reshape(4, 6)[:, ::2]
    assert np.array_equal(from_bytes(to_bytes(a)), a)


def test_file_round_trip(tmp_path):
    a = np.random.default_rng(1).standard_normal((3, 2, 2, 2))
    save_tensor(tmp_path / "t.knt", a)
    assert np.array_equal(load_tensor(tmp_path / "t.knt"), a)


@pytest.mark.parametrize("bad, match", [
    (np.zeros((1, 1, 1, 1, 1)), "rank"),
    (np.zeros(3, dtype=np.complex64), "dtype"),
    (np.float64(1.0), "rank"),
])
def test_write_errors(bad, match):
    with pytest.raises(FormatError, match=match):
        to_bytes(bad)


def test_read_errors():
    good = to_bytes(np.ones(4))
    with pytest.raises(FormatError, match="truncated"):
        from_bytes(good[:10])
    with pytest.raises(FormatError, match="magic"):
        from_bytes(b"XXXX" + good[4:])
    with pytest.raises(FormatError, match="payload"):
        from_bytes(good[:-1])
    with pytest.raises(FormatError, match="dtype"):
        from_bytes(good[:4] + b"\x09" + good[5:])
