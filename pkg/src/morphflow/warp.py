"""Differentiable resampling of a moving image at ``p + u(p)``.

A displacement field ``u`` is an array of shape ``(n, *shape)`` whose channel
``d`` holds the offset along array axis ``d`` in voxel units. Sample
locations outside the grid are clamped to the border (border replication).
"""
from __future__ import annotations

import itertools

import numpy as np

__all__ = [
    "identity_field",
    "sample_linear",
    "sample_nearest",
    "sample_linear_vjp",
]


def identity_field(shape, dtype=np.float64) -> np.ndarray:
    shape = tuple(int(s) for s in shape)
    if any(s <= 0 for s in shape):
        raise ValueError("dims must be positive")
    return np.zeros((len(shape),) + shape, dtype=dtype)


def _check(image: np.ndarray, u: np.ndarray):
    if u.ndim != image.ndim + 1 or u.shape[0] != image.ndim or u.shape[1:] != image.shape:
        raise ValueError(
            f"shape mismatch: image {image.shape} vs field {u.shape}"
        )


def _locations(u: np.ndarray) -> list[np.ndarray]:
    grids = np.indices(u.shape[1:], dtype=u.dtype)
    return [grids[d] + u[d] for d in range(u.shape[0])]


def _corners(image: np.ndarray, u: np.ndarray):
    """Lower corner indices, fractional weights and in-range masks per axis."""
    lows, fracs, inside = [], [], []
    for d, loc in enumerate(_locations(u)):
        top = image.shape[d] - 1
        inside.append((loc >= 0) & (loc < top))
        c = np.clip(loc, 0, top)
        # at the top border lo == top with weight 0 on the (clamped) upper corner
        lo = np.floor(c).astype(np.intp)
        lows.append(lo)
        fracs.append(c - lo)
    return lows, fracs, inside


def _gather(image: np.ndarray, lows):
    """Corner values stacked as an array of shape ``(2,)*n + shape``."""
    n = image.ndim
    flat = image.ravel()
    out = np.empty((2,) * n + image.shape, dtype=image.dtype)
    for bits in itertools.product((0, 1), repeat=n):
        idx = tuple(
            np.minimum(lo + b, image.shape[d] - 1) for d, (lo, b) in enumerate(zip(lows, bits))
        )
        out[bits] = flat[np.ravel_multi_index(idx, image.shape)]
    return out


def _reduce(corners: np.ndarray, fracs, diff_axis: int | None = None) -> np.ndarray:
    # Collapse one axis at a time: v0 + f (v1 - v0). Written this way a
    # constant image interpolates to exactly that constant.
    v = corners
    for d in range(len(fracs)):
        if d == diff_axis:
            v = v[1] - v[0]
        else:
            v = v[0] + fracs[d] * (v[1] - v[0])
    return v


def sample_linear(m, u) -> np.ndarray:
    """n-linear interpolation of ``m`` at ``p + u(p)``."""
    m = np.asarray(m)
    u = np.asarray(u)
    _check(m, u)
    lows, fracs, _ = _corners(m, u)
    return _reduce(_gather(m, lows), fracs)


def sample_nearest(s, u) -> np.ndarray:
    """Nearest-neighbour lookup for label maps; halves round towards +inf."""
    s = np.asarray(s)
    u = np.asarray(u)
    _check(s, u)
    idx = tuple(
        np.floor(np.clip(loc, 0, s.shape[d] - 1) + 0.5).astype(np.intp).clip(0, s.shape[d] - 1)
        for d, loc in enumerate(_locations(u))
    )
    return s[idx]


def sample_linear_vjp(m, u, upstream) -> np.ndarray:
    """Gradient of ``<upstream, sample_linear(m, u)>`` with respect to ``u``.

    Uses the right-hand derivative at integer sample locations and a zero
    derivative along any axis where the location was clamped.
    """
    m = np.asarray(m)
    u = np.asarray(u)
    upstream = np.asarray(upstream)
    _check(m, u)
    if upstream.shape != m.shape:
        raise ValueError(f"shape mismatch: upstream {upstream.shape} vs image {m.shape}")
    lows, fracs, inside = _corners(m, u)
    corners = _gather(m, lows)
    grad = np.empty_like(u, dtype=np.result_type(u, m))
    for d in range(m.ndim):
        grad[d] = np.where(inside[d], _reduce(corners, fracs, diff_axis=d) * upstream, 0.0)
    return grad
