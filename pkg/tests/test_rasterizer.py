import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from splatstream import tensor as tn
from splatstream.checks import random_primitives, rasterizer_gradchecks, square_camera
from splatstream.gaussians import GaussianField, GaussianParams, sh_eval
from splatstream.rasterizer import (
    Camera, project_covariance, project_point, rasterize, rasterize_arrays, rasterize_gradcheck, render,
)
from splatstream.tensor import Tensor


def brute_force(mu, log_scale, rot, opacity, sh, cam, background=(0, 0, 0)):
    """Plain per-pixel loops over every primitive (same alpha definition, nothing culled on screen)."""
    n = mu.shape[0]
    xc = mu @ cam.R.T + cam.t
    live = [i for i in range(n) if xc[i, 2] > cam.near]
    live.sort(key=lambda i: (xc[i, 2], i))
    R = Rotation.from_quat(rot[:, [1, 2, 3, 0]]).as_matrix()  # scipy wants (x, y, z, w)
    prim = []
    for i in live:
        x, y, z = xc[i]
        J = np.array([[cam.fx / z, 0, -cam.fx * x / z**2], [0, cam.fy / z, -cam.fy * y / z**2]])
        S = R[i] @ np.diag(np.exp(2 * log_scale[i])) @ R[i].T
        cov = J @ cam.R @ S @ cam.R.T @ J.T + 0.3 * np.eye(2)
        m = np.array([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy])
        d = mu[i] - cam.center
        c = sh_eval(sh[i], d / np.linalg.norm(d))
        prim.append((m, np.linalg.inv(cov), opacity[i], c))
    img = np.zeros((cam.height, cam.width, 3))
    alpha = np.zeros((cam.height, cam.width))
    for py in range(cam.height):
        for px in range(cam.width):
            p = np.array([px + 0.5, py + 0.5])
            T, acc = 1.0, np.zeros(3)
            for m, inv, op, c in prim:
                dd = p - m
                a = min(0.99, op * np.exp(-0.5 * dd @ inv @ dd))
                if a < 1 / 255:
                    continue
                acc += c * a * T
                T *= 1 - a
            img[py, px] = acc + T * np.asarray(background)
            alpha[py, px] = 1 - T
    return img, alpha


# -- projection -------------------------------------------------------------------------


def test_project_axis_point():
    cam = Camera(np.eye(3), np.zeros(3), 64, 64, 32, 32, 64, 64)
    u, v, z, culled = project_point([0, 0, 2.0], cam)
    assert (u, v, z, culled) == (32, 32, 2, False)


def test_project_off_axis():
    cam = Camera(np.eye(3), np.zeros(3), 64, 64, 32, 32, 64, 64)
    u, _, _, _ = project_point([1.0, 0, 2.0], cam)
    assert u == 64


def test_project_behind_near_is_culled():
    cam = Camera(np.eye(3), np.zeros(3), 64, 64, 32, 32, 64, 64, near=0.1)
    assert project_point([0, 0, 0.05], cam)[3]


def test_camera_rejects_bad_rotation():
    with pytest.raises(Exception):
        Camera(np.diag([1, 1, -1.0]), np.zeros(3), 64, 64, 32, 32, 64, 64)


def test_covariance_on_axis_closed_form():
    f, s = 40.0, 0.1
    cam = Camera(np.eye(3), np.zeros(3), f, f, 16, 16, 32, 32)
    cov = project_covariance([0, 0, 1.0], np.log([s, s, s]), [1, 0, 0, 0], cam)
    np.testing.assert_allclose(cov, (f * f * s * s + 0.3) * np.eye(2), rtol=1e-12)


def test_covariance_depth_scaling():
    cam = Camera(np.eye(3), np.zeros(3), 40, 40, 16, 16, 32, 32)
    ls, q = np.log([0.1, 0.2, 0.15]), [0.9, 0.1, 0.3, 0.2]
    a = project_covariance([0, 0, 1.0], ls, q, cam) - 0.3 * np.eye(2)
    b = project_covariance([0, 0, 2.0], ls, q, cam) - 0.3 * np.eye(2)
    np.testing.assert_allclose(b, a / 4, rtol=1e-10)


@given(st.lists(st.floats(-1, 1), min_size=4, max_size=4).filter(lambda q: np.linalg.norm(q) > 0.1))
def test_covariance_isotropic_rotation_invariant(q):
    cam = Camera(np.eye(3), np.zeros(3), 40, 40, 16, 16, 32, 32)
    ls = np.log([0.2] * 3)
    np.testing.assert_allclose(
        project_covariance([0.3, -0.2, 2.0], ls, q, cam), project_covariance([0.3, -0.2, 2.0], ls, [1, 0, 0, 0], cam),
        atol=1e-10,
    )


def test_covariance_is_spd(rng):
    cam = square_camera(32)
    mu, ls, rot, _, _ = random_primitives(rng, 30)
    cov = project_covariance(mu, ls, rot, cam)
    np.testing.assert_array_equal(cov, np.swapaxes(cov, 1, 2))
    assert np.all(np.linalg.eigvalsh(cov) > 0)


# -- forward ------------------------------------------------------------------------------------


def test_empty_field_gives_background():
    out = rasterize(GaussianField.empty(), square_camera(16), (0.2, 0.4, 0.6))
    np.testing.assert_array_equal(out.rgb[5, 7], [0.2, 0.4, 0.6])
    assert np.all(out.alpha == 0)


def test_opaque_on_axis_gaussian_color():
    c = np.array([0.8, 0.3, 0.1])
    sh = ((c - 0.5) / 0.28209479177387814).reshape(1, 3, 1)
    f = GaussianField([[0, 0, 2.0]], np.log([[0.5] * 3]), [[1, 0, 0, 0]], [20.0], sh, [1], [0], sh_degree=0)
    out = rasterize(f, square_camera(32))
    np.testing.assert_allclose(out.rgb[16, 16], c, rtol=0.02)
    assert out.alpha[16, 16] >= 0.98


@pytest.mark.parametrize("seed,n", [(0, 1), (1, 10), (2, 50)])
def test_matches_brute_force(seed, n):
    rng = np.random.default_rng(seed)
    prims = random_primitives(rng, n)
    prims = (prims[0], prims[1], prims[2] / np.linalg.norm(prims[2], axis=1, keepdims=True), *prims[3:])
    cam = Camera(Rotation.from_euler("xyz", [0.05, -0.1, 0.02]).as_matrix(), [0.05, 0, 0.1], 32, 32, 16, 16, 32, 32)
    bg = (0.1, 0.2, 0.3)
    _, rgb, alpha = rasterize_arrays(*prims, cam, bg)
    ref_rgb, ref_alpha = brute_force(*prims, cam, bg)
    assert np.abs(rgb - ref_rgb).max() <= 1e-5
    assert np.abs(alpha - ref_alpha).max() <= 1e-5


@settings(max_examples=15)
@given(st.integers(0, 2**16))
def test_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    prims = random_primitives(rng, 12)
    perm = rng.permutation(12)
    cam = square_camera(24)
    _, a, _ = rasterize_arrays(*prims, cam)
    _, b, _ = rasterize_arrays(*(p[perm] for p in prims), cam)
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_two_overlapping_either_order():
    f = GaussianField(
        [[0, 0, 2.0], [0.05, 0, 2.5]], np.log([[0.3] * 3, [0.3] * 3]), [[1, 0, 0, 0]] * 2, [1.0, 1.0],
        np.array([[[1.0], [0], [0]], [[0], [1.0], [0]]]), [1, 1], [0, 0], sh_degree=0,
    )
    a = rasterize(f, square_camera(16)).rgb
    b = rasterize(f.subset([1, 0]), square_camera(16)).rgb
    np.testing.assert_array_equal(a, b)


def test_zero_opacity_primitive_is_bitwise_noop(rng):
    prims = random_primitives(rng, 8)
    cam = square_camera(32)
    _, a, al = rasterize_arrays(*prims, cam)
    extra = random_primitives(rng, 1)
    both = [np.concatenate([p, q]) for p, q in zip(prims, extra)]
    both[3][-1] = 0.0
    _, b, bl = rasterize_arrays(*both, cam)
    assert a.tobytes() == b.tobytes() and al.tobytes() == bl.tobytes()


@settings(max_examples=20)
@given(st.integers(0, 2**16), st.integers(1, 40))
def test_alpha_bounded_and_rgb_finite(seed, n):
    rng = np.random.default_rng(seed)
    prims = random_primitives(rng, n, spread=1.5, depth=(0.01, 4.0))
    _, rgb, alpha = rasterize_arrays(*prims, square_camera(16))
    assert np.all((alpha >= 0) & (alpha <= 1))
    assert np.all(np.isfinite(rgb))


def test_early_stop_within_tolerance():
    rng = np.random.default_rng(4)
    prims = random_primitives(rng, 200, spread=0.3)
    prims = (*prims[:3], np.full(200, 0.95), prims[4])
    cam = square_camera(32)
    _, exact, _ = rasterize_arrays(*prims, cam)
    _, fast, _ = rasterize_arrays(*prims, cam, t_stop=1e-4)
    colour = np.abs(exact).max()
    assert np.abs(exact - fast).max() <= 1e-4 * max(colour, 1.0)


# -- gradients --------------------------------------------------------------------------------


def test_gradcheck_single_primitive():
    errs = rasterizer_gradchecks(seed=0, n_single=3, n_multi=0)
    assert max(errs["single"]) < 1e-5


def test_gradcheck_ten_primitives():
    errs = rasterizer_gradchecks(seed=1, n_single=0, n_multi=2, n_prims=10)
    assert max(errs["multi"]) < 1e-5


def test_gradcheck_saturated_opacity(rng):
    mu, ls, rot, _, sh = random_primitives(rng, 1)
    op = np.array([1 / (1 + np.exp(-12.0))])
    cam = square_camera(16)
    target = rng.uniform(0, 1, (16, 16, 3))
    assert rasterize_gradcheck(mu, ls, rot, op, sh, cam, target) < 1e-5


def test_render_tape_matches_arrays(rng):
    prims = random_primitives(rng, 6)
    cam = square_camera(16)
    with tn.precision(np.float64):
        ts = [Tensor(p, requires_grad=True) for p in prims]
        params = GaussianParams(*ts, confidence=Tensor(np.ones(6)))
        rgb, alpha = render(params, cam)
        tn.backprop(tn.tsum(rgb) + tn.tsum(alpha))
    _, ref, ref_a = rasterize_arrays(*prims, cam)
    np.testing.assert_allclose(rgb.data, ref, atol=1e-12)
    np.testing.assert_allclose(alpha.data, ref_a, atol=1e-12)
    assert all(t.grad is not None and np.all(np.isfinite(t.grad)) for t in ts)


def test_render_is_deterministic(rng):
    prims = random_primitives(rng, 20)
    cam = square_camera(32)
    target = rng.uniform(size=(32, 32, 3))
    grads = []
    for _ in range(2):
        proj, rgb, alpha = rasterize_arrays(*prims, cam)
        g = proj.backward(rgb - target, np.zeros_like(alpha))
        grads.append(b"".join(x.tobytes() for x in g))
    assert grads[0] == grads[1]


def test_exponent_cutoff_is_bitwise_neutral(rng, monkeypatch):
    from splatstream import _raster_kernels as K

    prims = random_primitives(rng, 200, spread=1.0)
    cam = square_camera(32)

    def run():
        proj, rgb, alpha = rasterize_arrays(*prims, cam, t_stop=1e-4)
        grads = proj.backward(np.ones_like(rgb), np.ones_like(alpha))
        return rgb.tobytes() + alpha.tobytes() + b"".join(g.tobytes() for g in grads)

    fast = run()
    monkeypatch.setattr(K, "log_cutoffs", lambda op, amin: np.full(op.shape[0], -np.inf))
    assert run() == fast
