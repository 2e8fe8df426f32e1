import numpy as np
import pytest

from liteseg import tensor as T


def test_shape4_validation():
    assert T.shape4(1, 3, 4, 5) == (1, 3, 4, 5)
    assert T.shape4((2, 1, 1, 1)).size == 2
    with pytest.raises(T.ShapeError):
        T.shape4(1, 0, 4, 4)
    with pytest.raises(T.ShapeError):
        T.shape4(1, 3, 4)


def test_from_array_and_zeros():
    x = T.from_array(range(24), (1, 2, 3, 4))
    assert x.dtype == np.float32 and x.shape == (1, 2, 3, 4)
    assert T.zeros((1, 1, 2, 2)).sum() == 0
    with pytest.raises(T.ShapeError):
        T.check_tensor(np.zeros((3, 3)))


def test_concat_channels_names_both_shapes():
    a, b = np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 4, 5))
    with pytest.raises(T.ShapeError, match=r"\(1,2,4,4\).*\(1,3,4,5\)"):
        T.concat_channels(a, b)
    assert T.concat_channels(a, np.ones((1, 3, 4, 4))).shape == (1, 5, 4, 4)


def test_slice_and_pad():
    x = np.arange(8.0).reshape(1, 2, 2, 2)
    assert np.array_equal(T.slice_channels(x, 1, 2), x[:, 1:])
    with pytest.raises(T.ShapeError):
        T.slice_channels(x, 1, 3)
    p = T.pad2d(x, 1, 0, 0, 2, value=-1)
    assert p.shape == (1, 2, 3, 4) and p[0, 0, 0, 0] == -1


def test_check_finite():
    T.check_finite(np.full((1, 1, 2, 2), 3e38, np.float32))
    with pytest.raises(T.NonFiniteError, match="conv1"):
        T.check_finite(np.array([[[[np.nan]]]]), "conv1")


def test_reflect_pad_to_multiple():
    x = np.arange(360 * 5, dtype=np.float32).reshape(1, 1, 360, 5)
    y = T.reflect_pad_to_multiple(np.tile(x, (1, 1, 1, 128)))
    assert y.shape == (1, 1, 384, 640)
    assert np.array_equal(y[0, 0, 360], y[0, 0, 358])
    z = np.zeros((1, 1, 64, 64))
    assert T.reflect_pad_to_multiple(z) is z
    assert T.next_multiple(100) == 128 and T.next_multiple(96) == 96
