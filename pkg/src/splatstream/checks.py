"""Gradient verification harnesses shared by the CLI and the test-suite."""

from __future__ import annotations

import numpy as np

from . import tensor as tn
from .backbone import BackboneConfig
from .gaussians import n_coeffs
from .rasterizer import Camera, rasterize_gradcheck
from .tensor import Tensor


def _t(rng, *shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


def primitive_cases(rng):
    """(name, f, inputs) triples, one per differentiable primitive, in f64."""
    w = rng.normal(size=(3, 4))
    a, b = _t(rng, 3, 4), _t(rng, 3, 4)
    v = _t(rng, 4)
    pos = _t(rng, 3, 4, lo=0.5, hi=2.0)
    sq = _t(rng, 2, 3, 4)
    mats = _t(rng, 2, 3, 5), _t(rng, 2, 5, 4)
    gain, bias = _t(rng, 4), _t(rng, 4)
    cl = _t(rng, 3, 4)
    # keep clamp inputs away from the kinks
    cl.data = np.where(np.abs(np.abs(cl.data) - 0.5) < 0.05, cl.data + 0.1, cl.data)
    mask = rng.random((3, 4)) < 0.5
    mask[0, 0] = True
    wt = lambda y: tn.tsum(y * Tensor(rng_w(y.shape)))  # noqa: E731
    fixed = {}

    def rng_w(shape):
        key = tuple(shape)
        if key not in fixed:
            fixed[key] = np.random.default_rng(len(fixed) + 7).normal(size=shape)
        return fixed[key]

    return [
        ("add", lambda: wt(a + b), [a, b]),
        ("add_broadcast", lambda: wt(a + v), [a, v]),
        ("sub", lambda: wt(a - b), [a, b]),
        ("mul", lambda: wt(a * b), [a, b]),
        ("div", lambda: wt(a / pos), [a, pos]),
        ("neg", lambda: wt(-a), [a]),
        ("power", lambda: wt(pos**2.5), [pos]),
        ("exp", lambda: wt(tn.exp(a)), [a]),
        ("log", lambda: wt(tn.log(pos)), [pos]),
        ("sqrt", lambda: wt(tn.sqrt(pos)), [pos]),
        ("sigmoid", lambda: wt(tn.sigmoid(a * 3.0)), [a]),
        ("softplus", lambda: wt(tn.softplus(a * 3.0)), [a]),
        ("gelu", lambda: wt(tn.gelu(a * 2.0)), [a]),
        ("clamp", lambda: wt(tn.clamp(cl, -0.5, 0.5)), [cl]),
        ("softmax", lambda: wt(tn.softmax(sq)), [sq]),
        ("layer_norm", lambda: wt(tn.layer_norm(sq, gain, bias)), [sq, gain, bias]),
        ("matmul", lambda: wt(tn.matmul(*mats)), list(mats)),
        ("matmul_const", lambda: wt(a @ Tensor(w.T)), [a]),
        ("reshape", lambda: wt(tn.reshape(sq, (6, 4))), [sq]),
        ("transpose", lambda: wt(tn.transpose(sq, (2, 0, 1))), [sq]),
        ("concat", lambda: wt(tn.concat([a, b], axis=1)), [a, b]),
        ("stack", lambda: wt(tn.stack([a, b], axis=0)), [a, b]),
        ("index", lambda: wt(tn.index(a, (slice(None), [0, 2, 2]))), [a]),
        ("take_rows", lambda: wt(tn.take_rows(a, [2, 0, 2])), [a]),
        ("masked_select", lambda: wt(tn.masked_select(a, mask)), [a]),
        ("sum", lambda: wt(tn.tsum(sq, axis=1)), [sq]),
        ("mean", lambda: wt(tn.mean(sq, axis=2)), [sq]),
        ("norm", lambda: wt(tn.norm_lastdim(a)), [a]),
    ]


def primitive_gradchecks(seed=0, eps=1e-5) -> dict:
    rng = np.random.default_rng(seed)
    out = {}
    with tn.precision(np.float64):
        for name, f, inputs in primitive_cases(rng):
            out[name] = tn.gradcheck(f, inputs, eps=eps)
    return out


def random_primitives(rng, n, sh_degree=1, spread=0.6, depth=(2.0, 3.0)):
    k = n_coeffs(sh_degree)
    mu = np.stack([rng.uniform(-spread, spread, n), rng.uniform(-spread, spread, n), rng.uniform(*depth, n)], 1)
    log_scale = rng.uniform(np.log(0.05), np.log(0.25), (n, 3))
    rot = rng.normal(size=(n, 4))
    opacity = rng.uniform(0.2, 0.9, n)
    sh = rng.normal(0.0, 0.4, (n, 3, k))
    return mu, log_scale, rot, opacity, sh


def square_camera(res=32, f=None):
    f = float(res) if f is None else f
    return Camera(np.eye(3), np.zeros(3), f, f, res / 2, res / 2, res, res)


def rasterizer_gradchecks(seed=0, n_single=10, n_multi=5, n_prims=10, res=32) -> dict:
    rng = np.random.default_rng(seed)
    cam = square_camera(res)
    res_ = {"single": [], "multi": []}
    for key, count, n in (("single", n_single, 1), ("multi", n_multi, n_prims)):
        for _ in range(count):
            prims = random_primitives(rng, n)
            target = rng.uniform(0, 1, (res, res, 3))
            res_[key].append(rasterize_gradcheck(*prims, cam, target))
    return res_


def model_gradcheck(seed=0, n_views_extra=1, eps=1e-5, image_size=32, max_tensors=None, check_dtype=np.float32):
    """Directional-derivative check of the full train loss on a 2-frame clip.

    Analytic gradients are taken in ``check_dtype``; the reference is a
    central difference of the same loss evaluated in float64 along a random
    unit direction per parameter tensor.  Returns {name: rel. error}.

    The 1/255 alpha skip and the photometric alpha mask make the training
    loss piecewise smooth with jumps; finite differences across a jump are
    meaningless, so both thresholds are set to 0 here and the per-view depth
    order is pinned to the one used at the base point.  Everything else
    (code path, clamps, losses) is the training configuration.
    """
    from .pipeline import Model, TrainConfig, clip_forward, clip_from_indices
    from .synthscene import SceneSpec, generate_sample

    spec = SceneSpec(seed=seed + 11, n_frames=60, resolution=image_size)
    scene = generate_sample(spec)
    gap = n_views_extra + 1
    clip = clip_from_indices(scene, [0, gap], list(range(1, gap)))
    cfg = TrainConfig(n_train=2, n_extra=n_views_extra, t_min=gap, t_max=gap, t_stop=0.0,
                      th_alpha=0.0, alpha_skip=0.0)
    mcfg = BackboneConfig(image_size=image_size)

    def build(dtype):
        with tn.precision(dtype):
            m = Model(mcfg)
        return m.astype(dtype)

    m_chk = build(check_dtype)
    tape = tn.get_tape()
    tape.reset()
    with tn.precision(check_dtype):
        pin = {}
        total, _ = clip_forward(m_chk, clip, cfg, pin=pin)
        tn.backprop(total)
    tape.reset()
    m64 = build(np.float64)
    p64 = dict(m64.named_parameters())
    rng = np.random.default_rng(seed + 99)
    names = [n for n, _ in m_chk.named_parameters()]
    if max_tensors is not None and max_tensors < len(names):
        names = sorted(rng.choice(names, size=max_tensors, replace=False).tolist())
    grads = {n: p.grad for n, p in m_chk.named_parameters()}
    out = {}

    def loss64():
        with tn.no_grad(), tn.precision(np.float64):
            t, _ = clip_forward(m64, clip, cfg, pin=pin)
        return float(t.data)

    for name in names:
        p = p64[name]
        d = rng.normal(size=p.shape)
        d /= np.linalg.norm(d)
        base = p.data.copy()
        p.data = base + eps * d
        lp = loss64()
        p.data = base - eps * d
        lm = loss64()
        p.data = base
        num = (lp - lm) / (2 * eps)
        g = grads[name]
        ana = 0.0 if g is None else float(np.sum(g.astype(np.float64) * d))
        out[name] = abs(ana - num) / max(abs(ana), abs(num), 1e-6)
    return out
