"""Registration energy: negative local cross-correlation plus diffusion smoothness.

All window sums are box filters with zero padding. Near the border a window
therefore shrinks to its in-domain voxels, and local means divide by that
in-domain count, which keeps the correlation invariant to affine intensity
changes everywhere.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .warp import sample_linear, sample_linear_vjp

__all__ = [
    "LossConfig",
    "box_sum",
    "local_cc",
    "local_cc_vjp",
    "diffusion_reg",
    "diffusion_reg_vjp",
    "total_loss",
    "LossTerms",
]


@dataclass(frozen=True)
class LossConfig:
    lam: float = 1.0
    cc_window: int = 9
    epsilon: float = 1e-5

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.cc_window < 1 or self.cc_window % 2 == 0:
            raise ValueError("cc_window must be an odd positive integer")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")


def box_sum(x: np.ndarray, width: int) -> np.ndarray:
    """Sum over a centered ``width``-wide box along every axis, zero padded.

    The operator is symmetric, so it is also its own adjoint.
    """
    ones = np.ones(width, dtype=x.dtype)
    out = x
    for axis in range(x.ndim):
        out = ndimage.correlate1d(out, ones, axis=axis, mode="constant", cval=0.0)
    return out


def _check_pair(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def _flat(var, sum_sq, dtype):
    # variance at roundoff level of the raw second moment counts as flat
    return var <= 16 * np.finfo(dtype).eps * sum_sq


def _window_stats(f, w, width):
    count = box_sum(np.ones_like(f), width)
    s_f = box_sum(f, width)
    s_w = box_sum(w, width)
    s_ff = box_sum(f * f, width)
    s_ww = box_sum(w * w, width)
    cross = box_sum(f * w, width) - s_f * s_w / count
    var_f = s_ff - s_f * s_f / count
    var_w = s_ww - s_w * s_w / count
    flat = _flat(var_f, s_ff, f.dtype) | _flat(var_w, s_ww, w.dtype)
    var_f = np.maximum(var_f, 0.0)
    var_w = np.maximum(var_w, 0.0)
    return count, s_f, s_w, cross, var_f, var_w, flat


def local_cc(f, w, cfg: LossConfig = LossConfig()):
    """Return ``(total, per_voxel)`` squared local correlation of ``f`` and ``w``.

    Windows where either image is flat contribute exactly zero.
    """
    f = np.asarray(f)
    w = np.asarray(w)
    _check_pair(f, w)
    *_, cross, var_f, var_w, flat = _window_stats(f, w, cfg.cc_window)
    per_voxel = np.where(flat, 0.0, cross * cross / (var_f * var_w + cfg.epsilon))
    return float(per_voxel.sum()), per_voxel


def local_cc_vjp(f, w, cfg: LossConfig = LossConfig(), upstream: float = 1.0) -> np.ndarray:
    """Gradient of ``upstream * local_cc(f, w).total`` with respect to ``w``."""
    f = np.asarray(f)
    w = np.asarray(w)
    _check_pair(f, w)
    width = cfg.cc_window
    count, s_f, s_w, cross, var_f, var_w, flat = _window_stats(f, w, width)
    denom = var_f * var_w + cfg.epsilon
    g_cross = np.where(flat, 0.0, 2.0 * cross / denom) * upstream
    g_var_w = np.where(flat, 0.0, -cross * cross * var_f / (denom * denom)) * upstream
    g_s_w = -(g_cross * s_f + 2.0 * g_var_w * s_w) / count
    return (
        f * box_sum(g_cross, width)
        + 2.0 * w * box_sum(g_var_w, width)
        + box_sum(g_s_w, width)
    )


def diffusion_reg(u) -> float:
    """Sum of squared forward differences of every channel along every axis."""
    u = np.asarray(u)
    total = 0.0
    for axis in range(1, u.ndim):
        total += float(np.sum(np.diff(u, axis=axis) ** 2))
    return total


def diffusion_reg_vjp(u) -> np.ndarray:
    u = np.asarray(u)
    grad = np.zeros_like(u)
    for axis in range(1, u.ndim):
        d = np.diff(u, axis=axis)
        hi = [slice(None)] * u.ndim
        lo = [slice(None)] * u.ndim
        hi[axis] = slice(1, None)
        lo[axis] = slice(None, -1)
        grad[tuple(hi)] += 2.0 * d
        grad[tuple(lo)] -= 2.0 * d
    return grad


@dataclass(frozen=True)
class LossTerms:
    loss: float
    cc: float
    smooth: float


def total_loss(f, m, u, cfg: LossConfig = LossConfig(), with_terms: bool = False):
    """Energy ``-CC(f, m o phi) + lam * smooth(u)`` and its gradient in ``u``.

    Returns ``(loss, grad_u)``, or ``(LossTerms, grad_u)`` with ``with_terms``.
    """
    f = np.asarray(f)
    m = np.asarray(m)
    u = np.asarray(u)
    _check_pair(f, m)
    warped = sample_linear(m, u)
    cc, _ = local_cc(f, warped, cfg)
    smooth = diffusion_reg(u)
    loss = -cc + cfg.lam * smooth
    g_warped = local_cc_vjp(f, warped, cfg, upstream=-1.0)
    grad = sample_linear_vjp(m, u, g_warped)
    if cfg.lam:
        grad += cfg.lam * diffusion_reg_vjp(u)
    if with_terms:
        return LossTerms(loss, cc, smooth), grad
    return loss, grad
