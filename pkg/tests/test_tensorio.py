import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from stn.episodic.tensorio import (
    ChecksumMismatch,
    decode_tensors,
    encode_tensors,
    load_tensors,
    save_tensors,
)
from stn.errors import FormatError


def sample_map():
    rng = np.random.default_rng(0)
    return {
        "w": rng.normal(size=(3, 4)),
        "img": rng.uniform(size=(2, 2, 3)).astype(np.float32),
        "scalar": np.array(2.5),
        "empty": np.zeros((0, 5)),
        "ünï": np.arange(4.0),
    }


def assert_same(a, b):
    assert list(a) == list(b)
    for k in a:
        assert a[k].dtype == b[k].dtype and a[k].shape == b[k].shape
        assert a[k].tobytes() == b[k].tobytes()


def test_round_trip(tmp_path):
    m = sample_map()
    path = tmp_path / "t.stnt"
    save_tensors(path, m)
    assert_same(load_tensors(path), m)


def test_layout_matches_documented_format():
    buf = encode_tensors({"ab": np.array([1.0, 2.0], dtype=np.float32)})
    expected = b"STNT" + struct.pack("<HI", 1, 1) + struct.pack("<H", 2) + b"ab"
    expected += struct.pack("<BB", 0, 1) + struct.pack("<I", 2) + np.array([1.0, 2.0], "<f4").tobytes()
    assert buf[:-4] == expected
    assert buf[-4:] == struct.pack("<I", zlib.crc32(expected))


def test_nan_and_inf_survive():
    m = {"x": np.array([np.nan, np.inf, -np.inf, -0.0])}
    assert_same(decode_tensors(encode_tensors(m)), m)


def test_rejects_unsupported_dtype():
    with pytest.raises(FormatError):
        encode_tensors({"i": np.arange(3)})


def test_truncated_file(tmp_path):
    path = tmp_path / "t.stnt"
    save_tensors(path, sample_map())
    path.write_bytes(path.read_bytes()[:30])
    with pytest.raises(FormatError) as info:
        load_tensors(path)
    assert info.value.offset is not None
    assert str(path) in str(info.value)


def test_checksum_mismatch():
    buf = bytearray(encode_tensors(sample_map()))
    buf[40] ^= 0x01
    with pytest.raises(ChecksumMismatch):
        decode_tensors(bytes(buf))


def test_bad_magic_and_trailing_bytes():
    buf = encode_tensors({"a": np.ones(2)})
    with pytest.raises(FormatError):
        decode_tensors(b"XXXX" + buf[4:])
    body = buf[:-4] + b"\x00"
    with pytest.raises(FormatError):
        decode_tensors(body + struct.pack("<I", zlib.crc32(body)))


def test_missing_file(tmp_path):
    with pytest.raises(FormatError):
        load_tensors(tmp_path / "nope.stnt")


def fuzz_cases(buf, n, seed):
    """Yield ``n`` corrupted copies of ``buf``: truncations and single-bit flips."""
    rng = np.random.default_rng(seed)
    for i in range(n):
        if i % 2 == 0:
            yield buf[: int(rng.integers(0, len(buf)))]
        else:
            b = bytearray(buf)
            pos = int(rng.integers(0, len(b)))
            b[pos] ^= 1 << int(rng.integers(0, 8))
            yield bytes(b)


def test_fuzz_structured_errors():
    buf = encode_tensors(sample_map())
    for bad in fuzz_cases(buf, 1000, seed=1):
        with pytest.raises(FormatError):
            decode_tensors(bad)


tensor_maps = st.dictionaries(
    st.text(min_size=1, max_size=12),
    st.one_of(
        arrays(np.float64, array_shapes(min_dims=0, max_dims=4, max_side=4)),
        arrays(np.float32, array_shapes(min_dims=0, max_dims=4, max_side=4)),
    ),
    max_size=5,
)


@settings(max_examples=100, deadline=None)
@given(tensor_maps)
def test_round_trip_property(m):
    assert_same(decode_tensors(encode_tensors(m)), m)
