"""Differentiable splatting renderer with analytic gradients.

Projection and the covariance/colour chain rule are vectorised numpy over
primitives; binning and per-pixel compositing live in ``_raster_kernels``.
Internally everything runs in float64; tensor outputs take the dtype of
the incoming means.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _raster_kernels as K
from . import tensor as tn
from .errors import ContractError
from .gaussians import GaussianField, GaussianParams, normalize_quats, quat_to_rotmat, sh_basis, sh_basis_jacobian
from .tensor import Tensor

BLUR = 0.3
TILE = 8


@dataclass
class Camera:
    R: np.ndarray  # world-to-camera rotation
    t: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float = 0.05

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if abs(np.linalg.det(self.R) - 1.0) > 1e-6:
            raise ContractError("camera rotation must have determinant 1")
        if self.fx <= 0 or self.fy <= 0 or self.near <= 0:
            raise ContractError("focal lengths and near plane must be positive")

    @classmethod
    def from_w2c(cls, w2c, fx, fy, cx, cy, width, height, near=0.05):
        m = np.asarray(w2c, dtype=np.float64).reshape(4, 4)
        return cls(m[:3, :3], m[:3, 3], fx, fy, cx, cy, width, height, near)

    @property
    def w2c(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.R
        m[:3, 3] = self.t
        return m

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    def intrinsics_dict(self):
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy, "width": self.width, "height": self.height}

    def with_pose(self, w2c) -> "Camera":
        return Camera.from_w2c(w2c, self.fx, self.fy, self.cx, self.cy, self.width, self.height, self.near)


def project_point(mu, cam: Camera):
    """(u, v, depth, culled) for one point or rows of points."""
    mu = np.asarray(mu, dtype=np.float64)
    xc = mu @ cam.R.T + cam.t
    z = xc[..., 2]
    culled = z <= cam.near
    safe = np.where(culled, 1.0, z)
    u = cam.fx * xc[..., 0] / safe + cam.cx
    v = cam.fy * xc[..., 1] / safe + cam.cy
    return u, v, z, culled


def _jacobian(xc, cam):
    x, y, z = xc[:, 0], xc[:, 1], xc[:, 2]
    J = np.zeros((xc.shape[0], 2, 3))
    J[:, 0, 0] = cam.fx / z
    J[:, 0, 2] = -cam.fx * x / (z * z)
    J[:, 1, 1] = cam.fy / z
    J[:, 1, 2] = -cam.fy * y / (z * z)
    return J


def project_covariance(mu, log_scale, rot, cam: Camera) -> np.ndarray:
    """Screen-space covariance J W Sigma W^T J^T + blur*I, [N, 2, 2] (or [2, 2])."""
    single = np.ndim(mu) == 1
    mu = np.atleast_2d(np.asarray(mu, dtype=np.float64))
    log_scale = np.atleast_2d(np.asarray(log_scale, dtype=np.float64))
    rot = np.atleast_2d(np.asarray(rot, dtype=np.float64))
    xc = mu @ cam.R.T + cam.t
    if np.any(xc[:, 2] <= cam.near):
        raise ContractError("project_covariance called on a culled primitive")
    qn, _ = normalize_quats(rot)
    Rq = quat_to_rotmat(qn)
    sigma3 = (Rq * np.exp(2 * log_scale)[:, None, :]) @ np.swapaxes(Rq, 1, 2)
    M = cam.R @ sigma3 @ cam.R.T
    J = _jacobian(xc, cam)
    cov = J @ M @ np.swapaxes(J, 1, 2)
    cov = 0.5 * (cov + np.swapaxes(cov, 1, 2)) + BLUR * np.eye(2)
    return cov[0] if single else cov


class _Projected:
    """Forward intermediates for one (field, camera) pair."""

    def __init__(self, mu, log_scale, rot, opacity, sh, cam: Camera, alpha_min=K.ALPHA_MIN, order=None):
        self.cam = cam
        self.alpha_min = float(alpha_min)
        n = mu.shape[0]
        self.n = n
        self.mu = mu
        self.opacity = opacity
        self.sh = sh
        self.degree = int(round(np.sqrt(sh.shape[-1]))) - 1
        xc = mu @ cam.R.T + cam.t
        self.xc = xc
        self.valid = xc[:, 2] > cam.near
        z = np.where(self.valid, xc[:, 2], 1.0)
        xs = xc.copy()
        xs[:, 2] = z
        self.xs = xs

        self.qn, self.qnorm = normalize_quats(rot)
        self.Rq = quat_to_rotmat(self.qn)
        self.s2 = np.exp(2 * log_scale)
        sigma3 = (self.Rq * self.s2[:, None, :]) @ np.swapaxes(self.Rq, 1, 2)
        self.M = cam.R @ sigma3 @ cam.R.T
        self.J = _jacobian(xs, cam)
        cov = self.J @ self.M @ np.swapaxes(self.J, 1, 2)
        cov = 0.5 * (cov + np.swapaxes(cov, 1, 2))
        A = cov[:, 0, 0] + BLUR
        B = cov[:, 0, 1]
        C = cov[:, 1, 1] + BLUR
        det = A * C - B * B
        self.cov = (A, B, C)
        self.conic = np.stack([C / det, -B / det, A / det], axis=1)
        self.mean2d = np.stack([cam.fx * xs[:, 0] / z + cam.cx, cam.fy * xs[:, 1] / z + cam.cy], axis=1)

        v = mu - cam.center
        self.vnorm = np.linalg.norm(v, axis=1)
        self.vnorm_safe = np.where(self.vnorm > 0, self.vnorm, 1.0)
        self.dirs = v / self.vnorm_safe[:, None]
        self.basis = sh_basis(self.dirs, self.degree)
        raw = (sh * self.basis[:, None, :]).sum(-1) + 0.5
        self.color_gate = raw > 0
        self.color = np.maximum(raw, 0.0)

        # pixel rectangle outside which alpha < alpha_min for sure
        if self.alpha_min > 0:
            lim = 2.0 * np.log(np.maximum(opacity, 1e-300) / self.alpha_min)
        else:
            lim = np.full(n, np.inf)
        reach = lim > 0
        rx = np.sqrt(np.maximum(lim, 0) * A) + 1.0
        ry = np.sqrt(np.maximum(lim, 0) * C) + 1.0
        W, H = cam.width, cam.height
        mx, my = self.mean2d[:, 0], self.mean2d[:, 1]
        xmin = np.floor(mx - rx - 0.5)
        xmax = np.ceil(mx + rx - 0.5)
        ymin = np.floor(my - ry - 0.5)
        ymax = np.ceil(my + ry - 0.5)
        on = self.valid & reach & (xmax >= 0) & (xmin <= W - 1) & (ymax >= 0) & (ymin <= H - 1)
        on &= np.isfinite(self.conic).all(axis=1) & np.isfinite(self.mean2d).all(axis=1)
        self.xmin = np.clip(np.nan_to_num(xmin), 0, W - 1).astype(np.int64)
        self.xmax = np.clip(np.nan_to_num(xmax), 0, W - 1).astype(np.int64)
        self.ymin = np.clip(np.nan_to_num(ymin), 0, H - 1).astype(np.int64)
        self.ymax = np.clip(np.nan_to_num(ymax), 0, H - 1).astype(np.int64)
        idx = np.nonzero(on)[0]
        # ascending depth, ties by primitive index; a pinned order keeps the
        # compositing sequence fixed (finite-difference checks)
        if order is None:
            self.order = idx[np.argsort(xc[idx, 2], kind="stable")]
        else:
            order = np.asarray(order, dtype=np.int64)
            self.order = order[on[order]]

    def composite(self, background, t_stop=0.0):
        self.t_stop = float(t_stop)
        cam = self.cam
        self.n_tx = (cam.width + TILE - 1) // TILE
        self.n_ty = (cam.height + TILE - 1) // TILE
        self.offsets, self.ids = K.bin_tiles(
            self.order, self.xmin, self.xmax, self.ymin, self.ymax, TILE, self.n_tx, self.n_ty
        )
        self.background = np.asarray(background, dtype=np.float64)
        self.log_cut = K.log_cutoffs(self.opacity, self.alpha_min)
        mean2d = np.nan_to_num(self.mean2d)
        conic = np.nan_to_num(self.conic)
        rgb, t_final, n_used = K.composite_forward(
            cam.width, cam.height, TILE, self.n_tx, self.offsets, self.ids,
            mean2d, conic, self.opacity, self.log_cut, self.color, self.background, self.t_stop, self.alpha_min,
        )
        self.t_final = t_final
        self.n_used = n_used
        return rgb, 1.0 - t_final

    def backward(self, grad_rgb, grad_alpha):
        cam = self.cam
        g_mean, g_conic, g_opac, g_color = K.composite_backward(
            cam.width, cam.height, TILE, self.n_tx, self.offsets, self.ids,
            np.nan_to_num(self.mean2d), np.nan_to_num(self.conic), self.opacity, self.log_cut, self.color,
            self.background, self.t_final, self.n_used,
            np.ascontiguousarray(grad_rgb, dtype=np.float64), np.ascontiguousarray(grad_alpha, dtype=np.float64), self.t_stop, self.alpha_min,
        )
        n = self.n
        v = self.valid
        g_mu = np.zeros((n, 3))
        g_log_scale = np.zeros((n, 3))
        g_rot = np.zeros((n, 4))

        # colour -> sh, view direction
        gc = g_color * self.color_gate
        g_sh = gc[:, :, None] * self.basis[:, None, :]
        if self.degree > 0:
            jac = sh_basis_jacobian(self.dirs, self.degree)  # [N, K, 3]
            g_dir = ((gc[:, :, None] * self.sh).sum(1)[:, :, None] * jac).sum(1)
            g_v = (g_dir - self.dirs * (self.dirs * g_dir).sum(1, keepdims=True)) / self.vnorm_safe[:, None]
            g_mu += np.where((self.vnorm > 0)[:, None], g_v, 0.0)

        # conic -> screen covariance
        a, b, c = g_conic[:, 0], g_conic[:, 1], g_conic[:, 2]
        GQ = np.stack([np.stack([a, 0.5 * b], -1), np.stack([0.5 * b, c], -1)], axis=1)
        Q = np.stack(
            [np.stack([self.conic[:, 0], self.conic[:, 1]], -1), np.stack([self.conic[:, 1], self.conic[:, 2]], -1)],
            axis=1,
        )
        GC = -Q @ GQ @ Q
        GC = 0.5 * (GC + np.swapaxes(GC, 1, 2))
        GC[~v] = 0.0

        JT = np.swapaxes(self.J, 1, 2)
        g_M = JT @ GC @ self.J
        g_J = 2.0 * GC @ self.J @ self.M

        # projection Jacobian and mean -> camera-space point
        x, y, z = self.xs[:, 0], self.xs[:, 1], self.xs[:, 2]
        fx, fy = cam.fx, cam.fy
        z2 = z * z
        z3 = z2 * z
        g_xc = np.zeros((n, 3))
        g_xc[:, 0] = g_J[:, 0, 2] * (-fx / z2) + g_mean[:, 0] * fx / z
        g_xc[:, 1] = g_J[:, 1, 2] * (-fy / z2) + g_mean[:, 1] * fy / z
        g_xc[:, 2] = (
            g_J[:, 0, 0] * (-fx / z2)
            + g_J[:, 0, 2] * (2 * fx * x / z3)
            + g_J[:, 1, 1] * (-fy / z2)
            + g_J[:, 1, 2] * (2 * fy * y / z3)
            - g_mean[:, 0] * fx * x / z2
            - g_mean[:, 1] * fy * y / z2
        )
        g_xc[~v] = 0.0
        g_mu += g_xc @ cam.R

        # 3D covariance -> scale and rotation
        g_s3 = cam.R.T @ g_M @ cam.R
        Rq = self.Rq
        g_s2 = ((g_s3 @ Rq) * Rq).sum(1)
        g_log_scale = g_s2 * 2.0 * self.s2
        g_R = 2.0 * (g_s3 @ Rq) * self.s2[:, None, :]
        g_qn = _rotmat_grad_to_quat(self.qn, g_R)
        qn = self.qn
        ok = self.qnorm > 0
        proj = g_qn - qn * (qn * g_qn).sum(1, keepdims=True)
        g_rot[ok] = proj[ok] / self.qnorm[ok, None]
        g_log_scale[~v] = 0.0
        g_rot[~v] = 0.0
        return g_mu, g_log_scale, g_rot, g_opac, g_sh


def _rotmat_grad_to_quat(q, G):
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    g = lambda i, j: G[:, i, j]  # noqa: E731
    dw = 2 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1))
    dx = 2 * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2 * x * g(1, 1) - w * g(1, 2) + z * g(2, 0) + w * g(2, 1) - 2 * x * g(2, 2))
    dy = 2 * (-2 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2) - w * g(2, 0) + z * g(2, 1) - 2 * y * g(2, 2))
    dz = 2 * (-2 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2 * z * g(1, 1) + y * g(1, 2) + x * g(2, 0) + y * g(2, 1))
    return np.stack([dw, dx, dy, dz], axis=1)


@dataclass
class RenderOutput:
    rgb: np.ndarray
    alpha: np.ndarray
    background: np.ndarray


def _field_arrays(field: GaussianField):
    return (
        field.mu.astype(np.float64),
        field.log_scale.astype(np.float64),
        field.rot.astype(np.float64),
        field.opacity,
        field.sh.astype(np.float64),
    )


def rasterize_arrays(mu, log_scale, rot, opacity, sh, cam: Camera, background=(0.0, 0.0, 0.0), t_stop=0.0, alpha_min=K.ALPHA_MIN, order=None):
    """Forward render from plain float arrays; returns (projected state, rgb, alpha)."""
    f64 = lambda a: np.ascontiguousarray(a, dtype=np.float64)  # noqa: E731
    proj = _Projected(f64(mu), f64(log_scale), f64(rot), f64(opacity), f64(sh), cam, alpha_min, order)
    rgb, alpha = proj.composite(background, t_stop)
    return proj, rgb, alpha


def rasterize(field: GaussianField, cam: Camera, background=(0.0, 0.0, 0.0), t_stop=0.0) -> RenderOutput:
    bg = np.asarray(background, dtype=np.float64)
    if len(field) == 0:
        return RenderOutput(np.broadcast_to(bg, (cam.height, cam.width, 3)).copy(), np.zeros((cam.height, cam.width)), bg)
    _, rgb, alpha = rasterize_arrays(*_field_arrays(field), cam, bg, t_stop)
    return RenderOutput(rgb, alpha, bg)


def render(params: GaussianParams, cam: Camera, background=(0.0, 0.0, 0.0), t_stop=0.0, alpha_min=K.ALPHA_MIN, order=None, pin=None):
    """Tape-aware render; returns (rgb [H,W,3], alpha [H,W]) tensors.

    ``pin``, if a list, receives the depth order actually used.
    """
    ins = (params.mu, params.log_scale, params.rot, params.opacity, params.sh)
    proj, rgb, alpha = rasterize_arrays(*(t.data for t in ins), cam, background, t_stop, alpha_min, order)
    if pin is not None:
        pin.append(proj.order.copy())
    out = np.concatenate([rgb, alpha[..., None]], axis=-1).astype(params.mu.dtype)

    def backward(g):
        g = np.asarray(g, dtype=np.float64)
        return proj.backward(g[..., :3], g[..., 3])

    packed = tn._make("rasterize", out, ins, backward)
    return packed[:, :, 0:3], packed[:, :, 3]


def rasterize_gradcheck(mu, log_scale, rot, opacity, sh, cam: Camera, target, background=(0.0, 0.0, 0.0), eps=1e-5):
    """Max relative error of analytic vs central-difference gradients of a pixel MSE.

    The loss jumps where a pixel's alpha crosses the 1/255 skip threshold.  A
    stencil straddling such a jump is detected by comparing step eps with
    eps/10; on disagreement the step shrinks (down to eps * 1e-3) until two
    consecutive estimates agree.
    """
    target = np.asarray(target, dtype=np.float64)
    arrays = [np.array(a, dtype=np.float64) for a in (mu, log_scale, rot, opacity, sh)]

    def loss(arrs):
        _, rgb, _ = rasterize_arrays(*arrs, cam, background)
        return float(np.mean((rgb - target) ** 2))

    proj, rgb, alpha = rasterize_arrays(*arrays, cam, background)
    g_rgb = 2.0 * (rgb - target) / rgb.size
    analytic = proj.backward(g_rgb, np.zeros_like(alpha))
    worst = 0.0
    for a, ga in zip(arrays, analytic):
        flat = a.reshape(-1)
        num = np.zeros(flat.size)
        for i in range(flat.size):
            orig = flat[i]

            def central(h):
                flat[i] = orig + h
                fp = loss(arrays)
                flat[i] = orig - h
                fm = loss(arrays)
                flat[i] = orig
                return (fp - fm) / (2 * h)

            h, d = eps, central(eps)
            while h > eps * 1e-3:
                d_fine = central(h / 10)
                if abs(d_fine - d) <= 1e-3 * max(abs(d), abs(d_fine), 1e-9):
                    break
                h, d = h / 10, d_fine
            num[i] = d
        worst = max(worst, tn.max_rel_error(ga.reshape(-1), num))
    return worst


def load_pose_json(path) -> np.ndarray:
    data = json.loads(Path(path).read_text())
    m = data["w2c"] if isinstance(data, dict) else data
    return np.asarray(m, dtype=np.float64).reshape(4, 4)
