import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from texscale.imagery import (Image, ScaleLevel, build_pyramid, extract_patches, gradient_norm,
                              level_size, read_image, resize, write_pgm, write_png)


def brute_levels(w0, h0, s, min_dim):
    def exps(size):
        out, x, e = [], float(size), 0
        while math.floor(size * s ** e) >= min_dim:
            out.append(e)
            e += 1
        return out
    return len(exps(w0)) * len(exps(h0))


def test_image_rejects_out_of_range():
    with pytest.raises(ValueError):
        Image(np.array([[1.5]]))
    with pytest.raises(ValueError):
        Image(np.zeros((0, 3)))


def test_luma_conversion():
    rgb = np.zeros((2, 2, 3))
    rgb[..., 1] = 1.0
    assert np.allclose(Image.from_rgb(rgb).data, 0.587)


def test_resize_identity_is_bit_identical():
    rng = np.random.default_rng(0)
    img = Image(rng.random((13, 17)))
    out = resize(img, 17, 13)
    assert np.array_equal(out.data, img.data)


def test_resize_constant_and_checker():
    img = Image(np.full((9, 11), 0.5))
    assert np.abs(resize(img, 4, 7).data - 0.5).max() < 1e-12
    assert np.abs(resize(img, 30, 20).data - 0.5).max() < 1e-12
    checker = Image(np.array([[0.0, 1.0], [1.0, 0.0]]))
    assert resize(checker, 1, 1).data[0, 0] == pytest.approx(0.5)


def test_resize_rejects_zero():
    with pytest.raises(ValueError):
        resize(Image(np.zeros((4, 4))), 0, 3)


def test_pyramid_100_gives_45_by_45():
    pyr = build_pyramid(Image(np.zeros((100, 100))), 0.95, 10)
    assert len(pyr) == 45 * 45
    assert ScaleLevel(44, 44) in pyr.levels and ScaleLevel(45, 0) not in pyr.levels
    assert pyr[44, 0].shape == (100, 10)


def test_pyramid_boundary_and_errors():
    pyr = build_pyramid(Image(np.zeros((10, 10))), 0.95, 10)
    assert list(pyr.levels) == [ScaleLevel(0, 0)]
    with pytest.raises(ValueError):
        build_pyramid(Image(np.zeros((9, 20))), 0.95, 10)
    with pytest.raises(ValueError):
        build_pyramid(Image(np.zeros((20, 20))), 1.0, 10)


def test_pyramid_level_sizes_and_base():
    rng = np.random.default_rng(1)
    img = Image(rng.random((30, 41)))
    pyr = build_pyramid(img, 0.9, 8)
    assert np.array_equal(pyr[0, 0].data, img.data)
    for lv, im in pyr:
        assert (im.width, im.height) == level_size(41, 30, 0.9, lv)
        assert min(im.shape) >= 8
    # anisotropic: rows untouched when n = 0
    assert np.allclose(pyr[3, 0].data, resize(img, level_size(41, 30, 0.9, ScaleLevel(3, 0))[0], 30).data)


def test_pyramid_counts_match_oracle_on_random_tuples():
    rng = np.random.default_rng(2)
    for _ in range(100):
        w0, h0 = rng.integers(5, 60, size=2)
        s = rng.uniform(0.5, 0.97)
        md = int(rng.integers(1, 5))
        pyr = build_pyramid(Image(np.zeros((h0, w0))), s, md)
        assert len(pyr) == brute_levels(w0, h0, s, md)
        assert len(set(pyr.levels)) == len(pyr)


def test_gradient_norm_cases():
    assert not gradient_norm(Image(np.full((5, 6), 0.3))).data.any()
    step = np.zeros((6, 8))
    step[:, 4:] = 1.0
    g = gradient_norm(Image(step)).data
    assert set(np.flatnonzero(g.any(axis=0))) == {3, 4}
    W = 9
    ramp = np.tile(np.arange(W) / (W - 1), (5, 1))
    g = gradient_norm(Image(ramp)).data
    assert np.allclose(g[1:-1, 1:-1], (1 / (W - 1)) / math.sqrt(2))
    with pytest.raises(ValueError):
        gradient_norm(Image(np.zeros((1, 5))))


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 12), st.integers(2, 12), st.integers(0, 10_000))
def test_gradient_zero_iff_constant(h, w, seed):
    arr = np.random.default_rng(seed).random((h, w))
    assert gradient_norm(Image(arr)).data.any()
    assert not gradient_norm(Image(np.full((h, w), arr[0, 0]))).data.any()


def test_extract_patches_counts():
    assert extract_patches(Image(np.zeros((16, 16))), 16, 16).shape == (1, 256)
    assert extract_patches(Image(np.zeros((32, 32))), 16, 16).shape == (4, 256)
    arr = np.arange(400, dtype=float).reshape(20, 20) / 400
    p = extract_patches(Image(arr), 16, 4)
    assert p.shape == (4, 256)
    assert p[1, 0] == arr[0, 4] and p[2, 0] == arr[4, 0]
    with pytest.raises(ValueError):
        extract_patches(Image(np.zeros((8, 8))), 9, 1)


def test_png_and_pgm_round_trip(tmp_path):
    arr = np.round(np.random.default_rng(3).random((7, 9)) * 255) / 255
    write_png(Image(arr), tmp_path / "a.png")
    write_pgm(Image(arr), tmp_path / "a.pgm")
    assert np.allclose(read_image(tmp_path / "a.png").data, arr)
    assert np.allclose(read_image(tmp_path / "a.pgm").data, arr)
