import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lucidcam.errors import ShapeError
from lucidcam.tensor import bilinear_resize, minmax_normalize, tensor_create


def test_create_constant_fill():
    t = tensor_create([2, 2], 0)
    assert t.dtype == np.float32
    np.testing.assert_array_equal(t, [[0, 0], [0, 0]])


def test_create_from_buffer():
    np.testing.assert_array_equal(tensor_create([3], [1, 2, 3]), [1, 2, 3])


def test_create_length_mismatch():
    with pytest.raises(ShapeError):
        tensor_create([2], [1, 2, 3])


def test_create_rejects_zero_extent():
    with pytest.raises(ShapeError):
        tensor_create([0, 2])


def test_resize_constant_extension():
    np.testing.assert_array_equal(bilinear_resize(tensor_create([1, 1], 5), 4, 4), np.full((4, 4), 5))


def test_resize_align_corners_2x2():
    out = bilinear_resize(np.array([[0, 1], [1, 0]], np.float32), 3, 3)
    np.testing.assert_allclose(out, [[0, 0.5, 1], [0.5, 0.5, 0.5], [1, 0.5, 0]], atol=1e-7)


def _bilinear_pixel(src, out_h, out_w, i, j):
    # scalar oracle written from the align-corners definition
    h, w = src.shape
    y = i * (h - 1) / (out_h - 1)
    x = j * (w - 1) / (out_w - 1)
    y0, x0 = int(y), int(x)
    y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
    dy, dx = y - y0, x - x0
    top = src[y0, x0] * (1 - dx) + src[y0, x1] * dx
    bot = src[y1, x0] * (1 - dx) + src[y1, x1] * dx
    return top * (1 - dy) + bot * dy


def test_resize_random_3x3_to_7x7_spot_checks(rng):
    src = rng.random((3, 3)).astype(np.float32)
    out = bilinear_resize(src, 7, 7)
    for i, j in [(0, 0), (6, 6), (1, 2), (3, 3), (5, 1)]:
        assert out[i, j] == pytest.approx(_bilinear_pixel(src.astype(np.float64), 7, 7, i, j), abs=1e-6)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 9), st.integers(1, 9), st.integers(1, 12), st.integers(1, 12), st.integers(0, 2**31))
def test_resize_shape_and_identity(h, w, oh, ow, seed):
    src = np.random.default_rng(seed).random((h, w)).astype(np.float32)
    assert bilinear_resize(src, oh, ow).shape == (oh, ow)
    np.testing.assert_allclose(bilinear_resize(src, h, w), src, atol=1e-6)
    if h >= 2 and w >= 2:
        out = bilinear_resize(src, max(oh, 2), max(ow, 2))
        for (a, b), (c, d) in [((0, 0), (0, 0)), ((-1, -1), (-1, -1)), ((0, -1), (0, -1)), ((-1, 0), (-1, 0))]:
            assert out[a, b] == pytest.approx(src[c, d], abs=1e-6)


@pytest.mark.parametrize("src,expected", [
    ([2, 4, 6], [0, 0.5, 1]),
    ([7, 7], [0, 0]),
    ([-1, 0, 3], [0, 0.25, 1]),
])
def test_minmax_examples(src, expected):
    np.testing.assert_allclose(minmax_normalize(np.array(src, np.float32)), expected, atol=1e-7)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=30))
def test_minmax_range_and_idempotence(values):
    t = np.array(values, np.float32)
    out = minmax_normalize(t)
    assert out.shape == t.shape
    assert out.min() >= 0 and out.max() <= 1
    if t.max() > t.min():
        np.testing.assert_allclose(minmax_normalize(out), out, atol=1e-6)
