import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from tstnet.data.records import (MAGIC, BadMagicError, HeaderError, PayloadError, TensorRecordError,
                                 dumps, loads, read_tensor, write_tensor)


def test_small_round_trip(tmp_path):
    write_tensor(tmp_path / "a.tsrf", np.array([[1, 2], [3, 4]], dtype=np.float32))
    out = read_tensor(tmp_path / "a.tsrf")
    assert out.shape == (2, 2) and out.dtype == np.float32
    np.testing.assert_array_equal(out, [[1, 2], [3, 4]])


def test_scalar():
    out = loads(dumps(np.float32(2.5)))
    assert out.shape == () and out == 2.5


def test_layout():
    blob = dumps(np.array([1.0], dtype=np.float32))
    assert blob[:4] == MAGIC
    (hlen,) = struct.unpack("<I", blob[4:8])
    assert blob[8 + hlen:] == struct.pack("<f", 1.0)


def test_special_values_bit_exact():
    vals = np.array([0.0, -0.0, np.float32(1e-45), -np.float32(1.4e-45), np.finfo(np.float32).tiny / 2,
                     np.finfo(np.float32).max, -np.finfo(np.float32).max, np.inf, -np.inf],
                    dtype=np.float32)
    out = loads(dumps(vals))
    assert out.tobytes() == vals.tobytes()


def test_nan_payload_preserved():
    vals = np.array([np.nan], dtype=np.float32)
    assert loads(dumps(vals)).tobytes() == vals.tobytes()


@settings(max_examples=500, deadline=None)
@given(arrays(np.float32, array_shapes(min_dims=0, max_dims=4, min_side=0, max_side=6),
              elements=st.floats(width=32, allow_nan=False)))
def test_round_trip_property(a):
    out = loads(dumps(a))
    assert out.shape == a.shape
    assert out.tobytes() == np.ascontiguousarray(a).tobytes()


def test_error_codes_are_distinct():
    codes = {cls.code for cls in (TensorRecordError, BadMagicError, HeaderError, PayloadError)}
    assert len(codes) == 4


def test_bad_magic():
    blob = bytearray(dumps(np.ones(3)))
    blob[0] ^= 0xFF
    with pytest.raises(BadMagicError) as e:
        loads(bytes(blob))
    assert e.value.code == "E_MAGIC"


def test_corrupted_header_byte():
    blob = bytearray(dumps(np.ones(3)))
    blob[9] = ord("!")
    with pytest.raises(HeaderError):
        loads(bytes(blob))


@pytest.mark.parametrize("cut", [5, 10, 20])
def test_truncated_header(cut):
    with pytest.raises(HeaderError):
        loads(dumps(np.ones(3))[:cut])


def test_truncated_payload():
    with pytest.raises(PayloadError) as e:
        loads(dumps(np.ones((2, 3)))[:-1])
    assert e.value.code == "E_PAYLOAD"


def test_shape_payload_mismatch():
    good = dumps(np.ones(4))
    hdr = b'{"dtype":"f32","shape":[5],"order":"row-major"}'
    blob = MAGIC + struct.pack("<I", len(hdr)) + hdr + good[-16:]
    with pytest.raises(PayloadError):
        loads(blob)


@pytest.mark.parametrize("hdr", [b'[1,2]', b'{"dtype":"f64","shape":[1],"order":"row-major"}',
                                 b'{"dtype":"f32","shape":[-1],"order":"row-major"}',
                                 b'{"dtype":"f32","shape":[true],"order":"row-major"}',
                                 b'{"dtype":"f32","shape":"x","order":"row-major"}'])
def test_invalid_headers(hdr):
    with pytest.raises(HeaderError):
        loads(MAGIC + struct.pack("<I", len(hdr)) + hdr)


def test_random_corruption_never_crashes():
    rng = np.random.default_rng(0)
    base = dumps(rng.standard_normal((3, 4)))
    for _ in range(2000):
        blob = bytearray(base)
        for i in rng.integers(0, len(blob), size=rng.integers(1, 4)):
            blob[i] = rng.integers(0, 256)
        try:
            loads(bytes(blob))
        except TensorRecordError:
            pass
