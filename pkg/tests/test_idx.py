import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from otafl.idx import (IdxMagicError, IdxTruncatedError, IdxTypeError, parse_idx, read_idx,
                       serialize_idx, write_idx)


def _handmade(code, dims, payload):
    # independent of serialize_idx: header assembled byte by byte
    return bytes([0, 0, code, len(dims)]) + b"".join(struct.pack(">I", d) for d in dims) + payload


def test_three_dim_ubyte():
    arr = parse_idx(_handmade(0x08, (2, 2, 2), bytes(range(8))))
    assert arr.shape == (2, 2, 2)
    assert arr.dtype == np.uint8
    assert arr[1, 0, 1] == 5


def test_one_dim_ubyte():
    arr = parse_idx(_handmade(0x08, (5,), b"\x01\x02\x03\x04\x05"))
    assert arr.shape == (5,)
    assert arr.tolist() == [1, 2, 3, 4, 5]


def test_big_endian_int32_payload():
    arr = parse_idx(_handmade(0x0C, (2,), struct.pack(">ii", -3, 70000)))
    assert arr.tolist() == [-3, 70000]


def test_truncated_header():
    with pytest.raises(IdxTruncatedError):
        parse_idx(b"\x00\x00\x08")


def test_truncated_dims():
    with pytest.raises(IdxTruncatedError):
        parse_idx(b"\x00\x00\x08\x02\x00\x00\x00\x02")


def test_truncated_payload():
    with pytest.raises(IdxTruncatedError):
        parse_idx(_handmade(0x08, (4,), b"\x00\x01"))


def test_bad_magic():
    with pytest.raises(IdxMagicError):
        parse_idx(b"\x01\x00\x08\x01\x00\x00\x00\x01\x00")


def test_unknown_type_code():
    with pytest.raises(IdxTypeError):
        parse_idx(_handmade(0x07, (1,), b"\x00"))


def test_errors_are_distinct_classes():
    assert len({IdxMagicError, IdxTruncatedError, IdxTypeError}) == 3


@settings(max_examples=60, deadline=None)
@given(arrays(np.uint8, st.lists(st.integers(1, 5), min_size=1, max_size=4).map(tuple)))
def test_roundtrip_ubyte(arr):
    out = parse_idx(serialize_idx(arr))
    assert out.shape == arr.shape
    np.testing.assert_array_equal(out, arr)


@pytest.mark.parametrize("dtype", [np.int8, np.int16, np.int32, np.float32, np.float64])
def test_roundtrip_other_types(dtype):
    arr = (np.arange(12).reshape(3, 4) - 5).astype(dtype)
    np.testing.assert_array_equal(parse_idx(serialize_idx(arr)), arr)


@pytest.mark.parametrize("name", ["x-idx1-ubyte", "x-idx1-ubyte.gz"])
def test_file_roundtrip(tmp_path, name):
    arr = np.arange(10, dtype=np.uint8)
    write_idx(tmp_path / name, arr)
    np.testing.assert_array_equal(read_idx(tmp_path / name), arr)
