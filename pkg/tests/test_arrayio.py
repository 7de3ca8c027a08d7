import numpy as np
import pytest

from kmtr.arrayio import ArrayFormatError, as_complex, load_array, save_array


@pytest.mark.parametrize("dtype", [np.float32, np.float64, np.uint8, np.int32])
def test_roundtrip_real(tmp_path, dtype):
    rng = np.random.default_rng(0)
    a = (rng.standard_normal((3, 4, 5)) * 10).astype(dtype)
    path = tmp_path / "a.kmtr"
    save_array(path, a)
    b = load_array(path)
    assert b.dtype == a.dtype
    assert np.array_equal(a, b)


def test_roundtrip_complex(tmp_path):
    rng = np.random.default_rng(1)
    a = rng.standard_normal((2, 3)) + 1j * rng.standard_normal((2, 3))
    path = tmp_path / "c.kmtr"
    save_array(path, a)
    stored = load_array(path)
    assert stored.shape == (2, 3, 2)
    assert np.array_equal(as_complex(stored), a)


def test_header_layout(tmp_path):
    a = np.arange(6, dtype=np.float32).reshape(2, 3)
    path = tmp_path / "h.kmtr"
    save_array(path, a)
    raw = path.read_bytes()
    assert raw[:4] == b"KMTR"
    assert raw[4] == 1  # version
    assert raw[5] == 0  # f32 code
    assert raw[6] == 2  # rank
    dims = np.frombuffer(raw[7:15], dtype="<u4")
    assert tuple(dims) == (2, 3)
    payload = np.frombuffer(raw[15:], dtype="<f4")
    assert np.array_equal(payload.reshape(2, 3), a)


def test_bad_magic(tmp_path):
    path = tmp_path / "junk.kmtr"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(ArrayFormatError):
        load_array(path)


def test_truncated_payload(tmp_path):
    a = np.ones((4, 4), dtype=np.float32)
    path = tmp_path / "t.kmtr"
    save_array(path, a)
    raw = path.read_bytes()
    path.write_bytes(raw[:-8])
    with pytest.raises(ArrayFormatError):
        load_array(path)
