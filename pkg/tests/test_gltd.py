import io
import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from glsd import gltd


def test_header_layout():
    blob = gltd.dumps(np.arange(6.0).reshape(2, 3))
    assert blob[:4] == b"GLTD"
    assert struct.unpack("<II", blob[4:12]) == (1, 2)
    assert struct.unpack("<QQ", blob[12:28]) == (2, 3)
    assert np.frombuffer(blob[28:], dtype="<f8").tolist() == [0, 1, 2, 3, 4, 5]


def test_read_header():
    blob = gltd.dumps(np.zeros((4, 1, 2)))
    assert gltd.read_header(io.BytesIO(blob)) == (1, (4, 1, 2))


@given(arrays(np.float64, array_shapes(min_dims=0, max_dims=4, max_side=5),
              elements=st.floats(allow_nan=False, allow_infinity=False)))
def test_roundtrip(arr):
    back = gltd.loads(gltd.dumps(arr))
    assert back.shape == arr.shape
    assert back.tobytes() == arr.tobytes()


@pytest.mark.parametrize("blob", [
    b"XXXX" + b"\x00" * 8,
    b"GLTD" + struct.pack("<II", 2, 0) + b"\x00" * 8,
    b"GLTD" + struct.pack("<II", 1, 1) + struct.pack("<Q", 3) + b"\x00" * 8,
])
def test_corrupt_blobs_rejected(blob):
    with pytest.raises(gltd.GLTDError):
        gltd.loads(blob)


def test_save_load(tmp_path):
    arr = np.random.default_rng(0).normal(size=(3, 2))
    gltd.save(tmp_path / "a.gltd", arr)
    assert np.array_equal(gltd.load(tmp_path / "a.gltd"), arr)
