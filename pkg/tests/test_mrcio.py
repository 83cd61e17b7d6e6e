import numpy as np
import pytest

from cryosort.errors import ParameterError
from cryosort.mrcio import read_mrc, write_mrc


def header_words(path):
    raw = path.read_bytes()
    return raw, np.frombuffer(raw[:1024], dtype="<i4")


def test_float_header_layout(tmp_path):
    path = tmp_path / "a.mrc"
    data = np.arange(24, dtype=float).reshape(2, 3, 4)
    write_mrc(path, data, 2.5)
    raw, words = header_words(path)
    assert len(raw) == 1024 + data.size * 4
    assert words[:4].tolist() == [4, 3, 2, 2]  # nx, ny, nz, mode
    assert raw[208:212] == b"MAP "
    assert words[55] == 0  # no labels


def test_mask_is_mode_zero(tmp_path):
    path = tmp_path / "m.mrc"
    mask = np.zeros((8, 6), bool)
    mask[2:4, 1] = True
    write_mrc(path, mask, 1.0)
    raw, words = header_words(path)
    assert words[3] == 0 and len(raw) == 1024 + 48
    back, _ = read_mrc(path)
    assert back.dtype == bool and np.array_equal(back[0] if back.ndim == 3 else back, mask)


@pytest.mark.parametrize("shape", [(16, 16), (8, 10, 12)])
def test_round_trip(tmp_path, shape):
    data = np.random.default_rng(0).standard_normal(shape)
    write_mrc(tmp_path / "x.mrc", data, 1.75)
    back, px = read_mrc(tmp_path / "x.mrc")
    assert px == pytest.approx(1.75)
    assert back.shape == shape
    assert np.array_equal(back, data.astype(np.float32).astype(np.float64))


def test_identical_arrays_give_identical_bytes(tmp_path):
    data = np.random.default_rng(1).standard_normal((12, 12, 12))
    write_mrc(tmp_path / "a.mrc", data, 2.5)
    write_mrc(tmp_path / "b.mrc", data.copy(), 2.5)
    assert (tmp_path / "a.mrc").read_bytes() == (tmp_path / "b.mrc").read_bytes()


@pytest.mark.parametrize("shape", [(5,), (2, 2, 2, 2)])
def test_bad_ndim(tmp_path, shape):
    with pytest.raises(ParameterError):
        write_mrc(tmp_path / "bad.mrc", np.zeros(shape), 1.0)


def test_unsupported_mode_rejected(tmp_path):
    import mrcfile

    path = tmp_path / "int16.mrc"
    with mrcfile.new(path) as m:
        m.set_data(np.zeros((4, 4), np.int16))
    with pytest.raises(ParameterError, match="mode 1"):
        read_mrc(path)
