import struct

import numpy as np
import pytest

from recdevid import ttf
from recdevid.ttf import TTFFormatError


def test_roundtrip_with_labels(rng, tmp_path):
    x = rng.normal(size=(5, 128, 73)).astype(np.float32)
    labels = [3, None, 0, 7, 7]
    path = tmp_path / "f.ttf"
    ttf.write_ttf1(path, x, labels)
    y, got = ttf.read_ttf1(path)
    assert y.dtype == np.float32 and np.array_equal(y.view(np.uint32), x.view(np.uint32))
    assert got == labels
    assert path.stat().st_size == 16 + 4 * 5 + 4 * 5 * 128 * 73


def test_layout_by_hand():
    x = np.arange(6, dtype=np.float32).reshape(1, 2, 3)
    data = ttf.encode(x, [9])
    assert data[:4] == b"TTF1"
    assert struct.unpack_from("<III", data, 4) == (1, 2, 3)
    assert struct.unpack_from("<I", data, 16) == (9,)
    assert struct.unpack_from("<6f", data, 20) == tuple(range(6))


def test_unlabeled_file_has_no_table(rng):
    x = rng.normal(size=(3, 4, 2)).astype(np.float32)
    data = ttf.encode(x)
    assert len(data) == 16 + 4 * 24
    y, labels = ttf.decode(data)
    assert labels == [None] * 3 and np.array_equal(x, y)
    assert ttf.encode(x, [None, None, None]) == data


def test_special_values_survive(tmp_path):
    x = np.array([[[np.inf, -0.0, np.float32(1e-45), np.nan]]], dtype=np.float32)
    y, _ = ttf.decode(ttf.encode(x, [1]))
    assert np.array_equal(y.view(np.uint32), x.view(np.uint32))


def test_corruption_detected(rng):
    data = ttf.encode(rng.normal(size=(2, 3, 4)).astype(np.float32), [0, 1])
    with pytest.raises(TTFFormatError):
        ttf.decode(data[:-1])
    with pytest.raises(TTFFormatError):
        ttf.decode(b"TTF2" + data[4:])
    with pytest.raises(TTFFormatError):
        ttf.decode(data[:10])
    with pytest.raises(TTFFormatError):
        ttf.encode(np.zeros((2, 3)))
    with pytest.raises(TTFFormatError):
        ttf.encode(np.zeros((2, 1, 1)), [1])
