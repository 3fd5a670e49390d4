import numpy as np
import pytest

from core.errors import FormatError
from utils.pder import decode_derived, encode_derived, load_derived, save_derived


def test_round_trip_is_bitwise(rng, tmp_path):
    plane = rng.random((3, 4))
    save_derived(plane, tmp_path / "plane.pder")
    loaded = load_derived(tmp_path / "plane.pder")
    assert loaded.dtype == plane.dtype
    assert loaded.tobytes() == plane.tobytes()


def test_float32_stack(rng):
    stack = rng.random((2, 5, 7)).astype(np.float32)
    assert np.array_equal(decode_derived(encode_derived(stack)), stack)


def test_header_layout():
    blob = encode_derived(np.zeros((3, 4), dtype=np.float64))
    assert blob[:4] == b"PDER"
    assert blob[4:8] == bytes([1, 0, 1, 2])
    assert blob[8:16] == bytes([3, 0, 0, 0, 4, 0, 0, 0])
    assert len(blob) == 16 + 12 * 8


@pytest.mark.parametrize("array", [np.zeros((0, 3)), np.float64(1.0)])
def test_empty_dims_rejected(array):
    with pytest.raises(FormatError):
        encode_derived(array)


def test_wrong_magic():
    blob = bytearray(encode_derived(np.ones((2, 2))))
    blob[:4] = b"XDER"
    with pytest.raises(FormatError):
        decode_derived(bytes(blob))


def test_truncated_payload():
    blob = encode_derived(np.ones((2, 2)))
    with pytest.raises(FormatError):
        decode_derived(blob[:-3])


def test_non_finite_rejected():
    with pytest.raises(FormatError):
        encode_derived(np.array([1.0, np.nan]))
