import cv2
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from confsplat.confidence import (
    ConfidenceConfig, EmptyMapError, canny_edges, confidence_map, edge_confidence, fuse_confidence,
    gradient_confidence, texture_confidence,
)
from confsplat.geometry import DimensionError, InvalidParameterError, Raster


def gray(img):
    return Raster(np.asarray(img, dtype=np.float64) / 255.0)


def test_constant_image():
    img = gray(np.full((16, 16), 90.0))
    assert np.all(edge_confidence(img).plane() == 1)
    assert np.all(texture_confidence(img).plane() == 1)


def test_step_edge_matches_reference_canny():
    img = np.zeros((32, 32))
    img[:, 16:] = 255
    ce = edge_confidence(gray(img)).plane()
    # reference: same Gaussian pre-blur, then OpenCV's detector with L2 gradient magnitude
    blurred = cv2.GaussianBlur(img.astype(np.uint8), (0, 0), 1.4)
    ref = cv2.Canny(blurred, 50, 150, L2gradient=True) > 0
    assert set(np.unique(np.nonzero(ce == 0)[1])) == set(np.unique(np.nonzero(ref)[1])) == {15}
    assert set(np.unique(ce)) == {0.0, 1.0}


def test_one_pixel_checkerboard():
    yy, xx = np.mgrid[:32, :32]
    board = ((yy + xx) % 2) * 255.0
    ce = edge_confidence(gray(board)).plane()
    ref = cv2.Canny(cv2.GaussianBlur(board.astype(np.uint8), (0, 0), 1.4), 50, 150, L2gradient=True)
    # blurring at sigma 1.4 flattens a 1-px board: neither detector fires
    assert ce.mean() == 1.0 and not ref.any()


def test_canny_thresholds_gate_edges():
    img = np.zeros((24, 24))
    img[:, 12:] = 30.0  # too weak for the high threshold
    assert not canny_edges(img).any()


def test_too_small_image():
    with pytest.raises(DimensionError):
        edge_confidence(gray(np.zeros((2, 5))))


def test_texture_examples():
    img = np.zeros((9, 9))
    img[4, 4] = 255
    ct = texture_confidence(gray(img)).plane()
    assert ct[4, 4] == 0.0 and ct.max() == 1.0
    ramp = np.tile(np.arange(12.0) * 10, (12, 1))
    ct = texture_confidence(gray(ramp)).plane()
    assert np.all(ct[1:-1, 1:-1] == 1.0)


def test_texture_matches_loop_laplacian(rng):
    img = rng.uniform(0, 255, (10, 11))
    pad = np.pad(img, 1, mode="edge")
    lap = np.zeros_like(img)
    for r in range(10):
        for c in range(11):
            lap[r, c] = pad[r, c + 1] + pad[r + 2, c + 1] + pad[r + 1, c] + pad[r + 1, c + 2] - 4 * pad[r + 1, c + 1]
    expect = 1 - np.abs(lap) / np.abs(lap).max()
    assert np.allclose(texture_confidence(gray(img)).plane(), expect, atol=1e-12)


def test_gradient_examples():
    assert np.all(gradient_confidence(Raster(np.full((8, 8), 3.0))).plane() == 1.0)
    ramp = np.tile(np.arange(10.0) * 0.1, (10, 1))
    cg = gradient_confidence(Raster(ramp)).plane()
    assert np.allclose(cg, 1.0, atol=1e-9)
    step = np.ones((10, 10))
    step[:, 5:] = 3.0
    cg = gradient_confidence(Raster(step)).plane()
    assert cg[:, 4:6].max() < cg[:, 1:3].min()


def test_gradient_matches_numpy_gradient_on_full_mask(rng):
    d = rng.uniform(1, 2, (7, 9))
    gy, gx = np.gradient(d)
    raw = 1 / (np.hypot(gx, gy) + 1e-6)
    assert np.allclose(gradient_confidence(Raster(d)).plane(), raw / raw.max(), rtol=1e-12)


def test_gradient_skips_invalid_neighbors():
    d = np.tile(np.arange(6.0), (5, 1))
    valid = np.ones_like(d, dtype=bool)
    valid[:, 3] = False
    d_bad = d.copy()
    d_bad[:, 3] = 1000.0  # ignored: zeroed by the mask and skipped by the stencil
    cg = gradient_confidence(Raster(d_bad, valid)).plane()
    assert np.allclose(cg[valid], 1.0) and np.all(cg[~valid] == 0)


def test_gradient_all_invalid():
    with pytest.raises(EmptyMapError):
        gradient_confidence(Raster(np.ones((4, 4)), np.zeros((4, 4), dtype=bool)))


def test_fusion_hand_cases():
    ones, zeros = Raster(np.ones((3, 3))), Raster(np.zeros((3, 3)))
    assert np.all(fuse_confidence(ones, ones, ones).plane() == 1.0)
    assert np.all(fuse_confidence(zeros, ones, ones).plane() == 0.8)
    assert np.all(fuse_confidence(ones, zeros, zeros).plane() == 0.2)


def test_fusion_mask_and_shape():
    a = Raster(np.ones((3, 3)), np.eye(3, dtype=bool))
    b = Raster(np.ones((3, 3)))
    assert np.array_equal(fuse_confidence(a, b, b).valid, np.eye(3, dtype=bool))
    with pytest.raises(DimensionError):
        fuse_confidence(Raster(np.ones((3, 4))), b, b)


def test_config_validation():
    with pytest.raises(InvalidParameterError):
        ConfidenceConfig(w_e=0.5, w_t=0.5, w_g=0.3)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_maps_bounded(seed):
    rng = np.random.default_rng(seed)
    img = Raster(rng.uniform(0, 1, (12, 13, 3)))
    depth = Raster(rng.uniform(0.5, 3, (12, 13)), rng.uniform(size=(12, 13)) < 0.8)
    if not depth.valid.any():
        return
    c = confidence_map(img, depth)
    for r in (c, edge_confidence(img), texture_confidence(img), gradient_confidence(depth)):
        assert r.plane().min() >= 0 and r.plane().max() <= 1


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_fusion_monotone(seed):
    rng = np.random.default_rng(seed)
    e, t, g = (rng.uniform(0, 1, (5, 5)) for _ in range(3))
    bump = rng.uniform(0, 0.3, (5, 5))
    base = fuse_confidence(Raster(e), Raster(t), Raster(g)).plane()
    for i in range(3):
        parts = [e, t, g]
        parts[i] = parts[i] + bump
        assert np.all(fuse_confidence(*(Raster(p) for p in parts)).plane() >= base)


def test_texture_translation_equivariant(rng):
    img = rng.uniform(0, 255, (20, 20))
    lap_a = np.abs(ndimage.correlate(img, [[0, 1, 0], [1, -4, 1], [0, 1, 0]], mode="nearest"))
    shifted = np.roll(img, 3, axis=1)
    a = texture_confidence(gray(img)).plane() * lap_a.max()
    b = texture_confidence(gray(shifted)).plane() * lap_a.max()
    assert np.allclose(np.roll(a, 3, axis=1)[2:-2, 5:-2], b[2:-2, 5:-2], atol=1e-9)
