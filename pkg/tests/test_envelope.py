import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from e2a.envelope import pack_array, pack_json, read_envelope, unpack_array, unpack_json, write_envelope
from e2a.errors import FormatError

MAGIC = b"E2ATESTS"


def test_round_trip(tmp_path):
    sections = {"meta": pack_json({"b": 1, "a": [1, 2]}), "x": pack_array(np.arange(6.0).reshape(2, 3))}
    write_envelope(tmp_path / "f", MAGIC, sections)
    back = read_envelope(tmp_path / "f", MAGIC)
    assert unpack_json(back["meta"]) == {"a": [1, 2], "b": 1}
    np.testing.assert_array_equal(unpack_array(back["x"]), np.arange(6.0).reshape(2, 3))


def test_wrong_magic(tmp_path):
    write_envelope(tmp_path / "f", MAGIC, {})
    with pytest.raises(FormatError):
        read_envelope(tmp_path / "f", b"E2AOTHER")


def test_truncated(tmp_path):
    write_envelope(tmp_path / "f", MAGIC, {"x": pack_array(np.ones(10))})
    raw = (tmp_path / "f").read_bytes()
    (tmp_path / "f").write_bytes(raw[:-5])
    with pytest.raises(FormatError):
        read_envelope(tmp_path / "f", MAGIC)


def test_newer_version(tmp_path):
    write_envelope(tmp_path / "f", MAGIC, {})
    raw = bytearray((tmp_path / "f").read_bytes())
    raw[8:12] = struct.pack("<I", 99)
    (tmp_path / "f").write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="version"):
        read_envelope(tmp_path / "f", MAGIC)


def test_trailing_bytes(tmp_path):
    write_envelope(tmp_path / "f", MAGIC, {})
    (tmp_path / "f").write_bytes((tmp_path / "f").read_bytes() + b"\0")
    with pytest.raises(FormatError):
        read_envelope(tmp_path / "f", MAGIC)


@given(hnp.arrays(np.float64, hnp.array_shapes(max_dims=3, max_side=5), elements=st.floats(allow_nan=False)))
def test_array_round_trip(a):
    np.testing.assert_array_equal(unpack_array(pack_array(a)), a)


@given(hnp.arrays(np.int64, hnp.array_shapes(max_dims=2, max_side=6)))
def test_int_array_round_trip(a):
    back = unpack_array(pack_array(a))
    assert back.dtype == np.int64
    np.testing.assert_array_equal(back, a)
