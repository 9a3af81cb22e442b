import numpy as np
import pytest

from confsplat.geometry import CameraModel, DimensionError, GaussianPrimitive, GaussianSet, InvalidParameterError
from confsplat.render import RenderPass, project_gaussian, render, render_backward

from conftest import random_scene


def loop_render(gs: GaussianSet, cam: CameraModel):
    """Straightforward per-pixel reference written from the blending formulas."""
    R, T, K = cam.rotation, cam.translation, cam.intrinsics
    items = []
    for i, g in enumerate(gs.to_primitives()):
        t = R @ g.center + T
        if t[2] <= 0.01:
            continue
        fx, fy = K[0, 0], K[1, 1]
        J = np.array([[fx / t[2], K[0, 1] / t[2], -(fx * t[0] + K[0, 1] * t[1]) / t[2] ** 2],
                      [0.0, fy / t[2], -fy * t[1] / t[2] ** 2]])
        cov = J @ R @ g.covariance @ R.T @ J.T + 0.3 * np.eye(2)
        mean = (K @ t)[:2] / t[2]
        r = 3 * np.sqrt(np.linalg.eigvalsh(cov).max())
        if mean[0] + r < -0.5 or mean[0] - r > cam.width - 0.5 or mean[1] + r < -0.5 or mean[1] - r > cam.height - 0.5:
            continue
        items.append((t[2], i, mean, np.linalg.inv(cov), g.opacity, g.color))
    items.sort(key=lambda it: (it[0], it[1]))
    color = np.zeros((cam.height, cam.width, 3))
    depth = np.zeros((cam.height, cam.width))
    valid = np.zeros((cam.height, cam.width), dtype=bool)
    for y in range(cam.height):
        for x in range(cam.width):
            T_acc, wsum, dsum = 1.0, 0.0, 0.0
            for z, _, mean, inv, op, col in items:
                if T_acc < 1e-4:
                    break
                d = np.array([x, y]) - mean
                a = min(op * np.exp(min(-0.5 * d @ inv @ d, 0.0)), 0.99)
                color[y, x] += col * a * T_acc
                wsum += a * T_acc
                dsum += z * a * T_acc
                T_acc *= 1 - a
            if wsum > 1e-6:
                valid[y, x] = True
                depth[y, x] = dsum / wsum
    return color, depth, valid


@pytest.mark.parametrize("seed", range(4))
def test_matches_loop_reference(seed):
    gs, cam = random_scene(np.random.default_rng(seed), n=6, size=12)
    out = render(gs, cam)
    color, depth, valid = loop_render(gs, cam)
    assert np.array_equal(out.depth.valid, valid)
    assert np.allclose(out.color.data, color, atol=1e-12)
    assert np.allclose(out.depth.plane(), depth, atol=1e-12)


def test_empty_scene():
    cam = CameraModel.look_at([0, -3, 0], [0, 0, 0], 10.0, 8, 8)
    out = render(GaussianSet.empty(), cam)
    assert not out.depth.valid.any() and np.all(out.color.data == 0)


def _axis_camera(size=9, focal=20.0):
    K = np.array([[focal, 0, (size - 1) / 2], [0, focal, (size - 1) / 2], [0, 0, 1]])
    return CameraModel(K, np.eye(3), np.zeros(3), size, size)


def test_single_gaussian_depth_is_exact():
    cam = _axis_camera()
    g = GaussianPrimitive([0, 0, 2.0], [0.05, 0.05, 0.05], [1, 0, 0, 0], 0.8, [1, 0, 0])
    out = render([g], cam)
    assert out.depth.plane()[4, 4] == 2.0
    assert np.isclose(out.alpha_sum.plane()[4, 4], 0.8)


def test_two_coincident_gaussians_depth():
    cam = _axis_camera()
    near = GaussianPrimitive([0, 0, 1.0], [0.02, 0.02, 0.02], [1, 0, 0, 0], 0.5, [1, 1, 1])
    far = GaussianPrimitive([0, 0, 3.0], [0.06, 0.06, 0.06], [1, 0, 0, 0], 0.5, [1, 1, 1])
    out = render([far, near], cam)
    assert np.isclose(out.depth.plane()[4, 4], 1.25 / 0.75, atol=1e-12)


def test_projection_covariance_on_axis():
    fx, z, s = 30.0, 2.5, 0.1
    cam = _axis_camera(focal=fx)
    p = project_gaussian(GaussianPrimitive([0, 0, z], [s, s, s], [1, 0, 0, 0], 0.5, [0, 0, 0]), cam)
    expect = (fx * s / z) ** 2 + 0.3
    assert np.allclose(p.cov2d, np.diag([expect, expect]), atol=1e-12)
    assert p.depth == z


def test_culling():
    cam = _axis_camera()
    behind = GaussianPrimitive([0, 0, -2.0], [0.1] * 3, [1, 0, 0, 0], 0.5, [0, 0, 0])
    assert project_gaussian(behind, cam) is None
    near = GaussianPrimitive([0, 0, 0.005], [0.1] * 3, [1, 0, 0, 0], 0.5, [0, 0, 0])
    assert project_gaussian(near, cam) is None
    far_off = GaussianPrimitive([50.0, 0, 2.0], [0.01] * 3, [1, 0, 0, 0], 0.5, [0, 0, 0])
    assert project_gaussian(far_off, cam) is None


def test_corner_footprint_not_culled():
    # center just outside the corner but its 3-sigma footprint reaches inside
    cam = _axis_camera(size=9, focal=20.0)
    g = GaussianPrimitive([-0.24, -0.24, 1.0], [0.02] * 3, [1, 0, 0, 0], 0.5, [0, 0, 0])
    p = project_gaussian(g, cam)
    assert p is not None
    assert np.all(p.pixel_mean < -0.5)
    # brute force: some pixel lies inside the 3-sigma ellipse
    inv = np.linalg.inv(p.cov2d)
    ys, xs = np.mgrid[0:9, 0:9]
    d = np.stack([xs - p.pixel_mean[0], ys - p.pixel_mean[1]], -1)
    assert np.einsum("...i,ij,...j->...", d, inv, d).min() <= 9.0


def test_transmittance_identity_and_depth_bounds(rng):
    for _ in range(5):
        gs, cam = random_scene(rng, n=8, size=14)
        out = render(gs, cam)
        total = out.alpha_sum.plane() + out.final_transmittance
        assert np.allclose(total, 1.0, atol=1e-6)
        t = gs.centers @ cam.rotation.T + cam.translation
        d = out.depth.plane()[out.depth.valid]
        assert np.all(d >= t[:, 2].min() - 1e-12) and np.all(d <= t[:, 2].max() + 1e-12)
        assert np.all(out.alpha_sum.plane() <= 1.0)


def test_permutation_invariance(rng):
    gs, cam = random_scene(rng, n=7, size=12)
    perm = rng.permutation(len(gs))
    a, b = render(gs, cam), render(gs.subset(perm), cam)
    assert np.array_equal(a.color.data, b.color.data)
    assert np.array_equal(a.depth.data, b.depth.data)


def test_non_finite_names_index(rng):
    gs, cam = random_scene(rng, n=3)
    gs.centers[2, 0] = np.nan
    with pytest.raises(InvalidParameterError, match="2"):
        render(gs, cam)


def test_zero_cotangent_gives_zero_gradient(rng):
    gs, cam = random_scene(rng, n=4)
    g = render_backward(gs, cam, np.zeros((16, 16, 3)), np.zeros((16, 16)))
    assert not np.any(g.pack())


def test_cotangent_shape_checked(rng):
    gs, cam = random_scene(rng, n=2)
    with pytest.raises(DimensionError):
        render_backward(gs, cam, np.zeros((8, 8, 3)), None)


def _fd_check(gs, cam, loss_of, grad_args, h=1e-5):
    g = render_backward(gs, cam, *grad_args).pack()
    base = gs.pack()
    fd = np.zeros_like(base)
    for i in range(len(base)):
        for sgn in (1, -1):
            v = base.copy()
            v[i] += sgn * h
            fd[i] += sgn * loss_of(render(GaussianSet.unpack(v), cam)) / (2 * h)
    return g, fd


def test_single_pixel_color_gradient():
    rng = np.random.default_rng(5)
    gs, cam = random_scene(rng, n=1, size=10)
    gc = np.zeros((10, 10, 3))
    gc[5, 4, 1] = 1.0
    g, fd = _fd_check(gs, cam, lambda o: o.color.data[5, 4, 1], (gc, None))
    assert np.all(np.abs(g - fd) <= 1e-4 * np.maximum(np.abs(fd), 1e-4))


def test_depth_gradient_wrt_front_opacity():
    cam = _axis_camera(size=9)
    gs = GaussianSet.from_primitives([
        GaussianPrimitive([0.01, 0, 1.5], [0.06, 0.04, 0.05], [1, 0, 0, 0], 0.6, [1, 0, 0]),
        GaussianPrimitive([0, 0.02, 3.0], [0.1, 0.1, 0.1], [1, 0, 0, 0], 0.7, [0, 1, 0]),
    ])
    gd = np.zeros((9, 9))
    gd[4, 4] = 1.0
    g = render_backward(gs, cam, None, gd)
    h = 1e-5
    vals = []
    for sgn in (1, -1):
        shifted = gs.copy()
        shifted.opacity_logits[0] += sgn * h
        vals.append(render(shifted, cam).depth.plane()[4, 4])
    fd = (vals[0] - vals[1]) / (2 * h)
    assert abs(g.opacity_logits[0] - fd) <= 1e-4 * abs(fd)


@pytest.mark.parametrize("seed", range(3))
def test_random_scene_gradients(seed):
    rng = np.random.default_rng(100 + seed)
    gs, cam = random_scene(rng, n=4, size=10)
    wc = rng.normal(size=(10, 10, 3))
    wd = rng.normal(size=(10, 10))

    def loss(o):
        return np.sum(wc * o.color.data) + np.sum(wd * o.depth.plane() * o.depth.valid)

    g, fd = _fd_check(gs, cam, loss, (wc, wd))
    assert np.all(np.abs(g - fd) <= 1e-3 * np.abs(fd) + 1e-8 + 1e-6 * np.abs(fd).max())


def test_render_pass_matches_render_backward(rng):
    gs, cam = random_scene(rng, n=5)
    gc = rng.normal(size=(16, 16, 3))
    gd = rng.normal(size=(16, 16))
    rp = RenderPass(gs, cam)
    assert np.array_equal(rp.output.color.data, render(gs, cam).color.data)
    assert np.array_equal(rp.backward(gc, gd).pack(), render_backward(gs, cam, gc, gd).pack())


def test_deterministic(rng):
    gs, cam = random_scene(rng, n=6)
    a, b = render(gs, cam), render(gs, cam)
    assert np.array_equal(a.color.data, b.color.data)
