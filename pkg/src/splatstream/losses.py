"""Pointmap regression with confidence, masked photometric error, total objective."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as tn
from .errors import ContractError, DimensionError
from .tensor import Tensor


@dataclass
class LossReport:
    l_conf: float
    l_mmse: float
    total: float
    z_pred: float
    z_gt: float
    masked_fraction: float
    l_regr: float = 0.0  # mean unweighted regression error, diagnostic only
    render_scale: float = 1.0  # z_pred / z_gt applied to camera translations

    def to_json(self, step: int, **extra) -> str:
        rec = {"step": step, **asdict(self), **extra}
        return json.dumps(rec)


def _as_t(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _stack_frames(pointmaps):
    if isinstance(pointmaps, Tensor):
        return pointmaps if pointmaps.ndim == 4 else pointmaps.reshape((1,) + pointmaps.shape)
    items = [_as_t(p) for p in pointmaps]
    return tn.stack(items, axis=0)


def _stack_masks(valid, shape):
    m = np.asarray(valid, dtype=bool)
    if m.ndim == 2:
        m = m[None]
    if m.shape != shape:
        raise DimensionError(f"validity mask {m.shape} vs pointmaps {shape}")
    return m


def scale_factor(pointmaps, valid) -> Tensor:
    """Mean Euclidean norm of all valid points across every frame of a clip."""
    x = _stack_frames(pointmaps)
    m = _stack_masks(valid, x.shape[:-1])
    if not m.any():
        raise ContractError("scale_factor needs at least one valid pixel")
    return tn.mean(tn.norm_lastdim(tn.masked_select(x, m)))


def regr_loss(x_gt, x_pred, valid, z_gt=None, z_pred=None) -> Tensor:
    """Per-pixel ||X_gt/z_gt - X_pred/z_pred||, zero at invalid pixels.

    Returns a [T, H, W] map.  Each side is normalised by its own scale.
    """
    gt = _stack_frames(x_gt)
    pred = _stack_frames(x_pred)
    if gt.shape != pred.shape:
        raise DimensionError(f"pointmap shapes differ: {gt.shape} vs {pred.shape}")
    m = _stack_masks(valid, gt.shape[:-1])
    z_gt = scale_factor(gt, m) if z_gt is None else z_gt
    z_pred = scale_factor(pred, m) if z_pred is None else z_pred
    diff = gt / z_gt - pred / z_pred
    return tn.norm_lastdim(diff) * Tensor(m.astype(gt.dtype))


def conf_loss(l_regr, conf, valid, alpha: float) -> Tensor:
    """Mean over valid pixels of C * l - alpha * log C."""
    if alpha <= 0:
        raise ContractError(f"alpha must be positive, got {alpha}")
    l_regr = _as_t(l_regr)
    conf = _as_t(conf)
    if conf.ndim == 2:
        conf = conf.reshape((1,) + conf.shape)
    if l_regr.ndim == 2:
        l_regr = l_regr.reshape((1,) + l_regr.shape)
    if np.any(conf.data < 1):
        raise ContractError("confidence must be >= 1 everywhere")
    m = _stack_masks(valid, l_regr.shape)
    c = tn.masked_select(conf, m)
    l = tn.masked_select(l_regr, m)
    return tn.mean(c * l - alpha * tn.log(c))


def mask_from_alpha(alpha_map, th_alpha: float) -> np.ndarray:
    a = alpha_map.data if isinstance(alpha_map, Tensor) else np.asarray(alpha_map)
    return a >= th_alpha


def masked_mse(i_gt, i_pred, alpha_map, th_alpha: float):
    """Photometric MSE over pixels whose rendered alpha reaches ``th_alpha``.

    The mask carries no gradient.  Returns (loss, masked_fraction); the loss
    is 0 when every pixel is masked.
    """
    if th_alpha < 0:
        raise ContractError("th_alpha must be >= 0")
    i_pred = _as_t(i_pred)
    i_gt = np.asarray(i_gt.data if isinstance(i_gt, Tensor) else i_gt)
    if i_gt.shape != i_pred.shape:
        raise DimensionError(f"image shapes differ: {i_gt.shape} vs {i_pred.shape}")
    m = mask_from_alpha(alpha_map, th_alpha)
    frac_masked = 1.0 - float(m.mean())
    if not m.any():
        return Tensor(0.0, dtype=i_pred.dtype), 1.0
    pred = tn.masked_select(i_pred, m)
    gt = Tensor(i_gt[m], dtype=i_pred.dtype)
    return tn.mean((gt - pred) ** 2), frac_masked


def total_loss(l_conf, l_mmse, lam: float):
    if lam < 0:
        raise ContractError("lambda must be >= 0")
    return l_conf + lam * l_mmse
