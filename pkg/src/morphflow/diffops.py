"""Network primitives with hand-written backward passes.

Tensors are plain arrays shaped ``(channels, *spatial)``. Convolutions are
cross-correlations with "same" zero padding; a stride-2 convolution is the
stride-1 result sampled at even positions, so output ``j`` reads the window
centered at input ``2j``.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "ConvKernel",
    "conv_forward",
    "conv_backward",
    "leaky_relu_forward",
    "leaky_relu_backward",
    "upsample_nearest",
    "upsample_nearest_backward",
    "concat_channels",
    "concat_channels_backward",
    "FDReport",
    "finite_diff_check",
]


@dataclass
class ConvKernel:
    """Weights ``(out, in, *extent)`` and one bias per output channel."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        if self.bias.shape != (self.weight.shape[0],):
            raise ValueError("bias must have one entry per output channel")
        if any(k % 2 == 0 for k in self.weight.shape[2:]):
            raise ValueError("kernel extents must be odd")

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def extent(self) -> tuple[int, ...]:
        return self.weight.shape[2:]


def _im2col(x: np.ndarray, extent, stride: int) -> tuple[np.ndarray, tuple[int, ...]]:
    n = x.ndim - 1
    pads = [(0, 0)] + [(k // 2, k // 2) for k in extent]
    xp = np.pad(x, pads)
    win = sliding_window_view(xp, extent, axis=tuple(range(1, n + 1)))
    if stride != 1:
        win = win[(slice(None),) + (slice(None, None, stride),) * n]
    out_shape = win.shape[1 : n + 1]
    # (C, *out, *k) -> (C, *k, *out) -> (C*K, N)
    order = (0,) + tuple(range(n + 1, 2 * n + 1)) + tuple(range(1, n + 1))
    cols = np.ascontiguousarray(win.transpose(order)).reshape(-1, int(np.prod(out_shape)))
    return cols, out_shape


def _check_conv(x: np.ndarray, k: ConvKernel, stride: int):
    if stride not in (1, 2):
        raise ValueError("stride must be 1 or 2")
    if x.ndim - 1 != len(k.extent):
        raise ValueError(f"input rank {x.ndim - 1} does not match kernel rank {len(k.extent)}")
    if x.shape[0] != k.in_channels:
        raise ValueError(f"channel mismatch: input has {x.shape[0]}, kernel expects {k.in_channels}")
    if any(s + 2 * (e // 2) < e for s, e in zip(x.shape[1:], k.extent)):
        raise ValueError("spatial dims too small for kernel")


def conv_forward(x, k: ConvKernel, stride: int = 1, return_cols: bool = False):
    """Convolve ``x``; stride 2 gives ``ceil(dim / 2)`` outputs per axis."""
    x = np.asarray(x)
    _check_conv(x, k, stride)
    cols, out_shape = _im2col(x, k.extent, stride)
    y = k.weight.reshape(k.out_channels, -1) @ cols
    y += k.bias[:, None]
    y = y.reshape((k.out_channels,) + out_shape)
    if return_cols:
        return y, cols
    return y


def conv_backward(x, k: ConvKernel, stride: int, upstream, cols=None):
    """Return ``(grad_x, grad_weight, grad_bias)`` for ``<upstream, conv_forward(x)>``.

    ``cols`` may be passed from a ``return_cols=True`` forward to skip the
    second unfold of ``x``.
    """
    x = np.asarray(x)
    _check_conv(x, k, stride)
    n = x.ndim - 1
    if cols is None:
        cols, out_shape = _im2col(x, k.extent, stride)
    else:
        out_shape = tuple(-(-s // stride) for s in x.shape[1:])
    upstream = np.asarray(upstream)
    if upstream.shape != (k.out_channels,) + out_shape:
        raise ValueError(f"upstream shape {upstream.shape} does not match output")
    g = upstream.reshape(k.out_channels, -1)
    grad_w = (g @ cols.T).reshape(k.weight.shape)
    grad_b = g.sum(axis=1)
    gcols = (k.weight.reshape(k.out_channels, -1).T @ g).reshape(
        (x.shape[0],) + tuple(k.extent) + out_shape
    )
    halves = [e // 2 for e in k.extent]
    gpad = np.zeros((x.shape[0],) + tuple(s + 2 * h for s, h in zip(x.shape[1:], halves)), dtype=gcols.dtype)
    for offs in itertools.product(*(range(e) for e in k.extent)):
        dst = (slice(None),) + tuple(
            slice(o, o + stride * (m - 1) + 1, stride) for o, m in zip(offs, out_shape)
        )
        gpad[dst] += gcols[(slice(None),) + offs]
    inner = (slice(None),) + tuple(slice(h, h + s) for h, s in zip(halves, x.shape[1:]))
    return gpad[inner], grad_w, grad_b


def leaky_relu_forward(x, slope: float = 0.2) -> np.ndarray:
    x = np.asarray(x)
    return np.where(x >= 0, x, slope * x)


def leaky_relu_backward(x, slope: float, upstream) -> np.ndarray:
    x = np.asarray(x)
    return np.where(x >= 0, upstream, slope * np.asarray(upstream))


def upsample_nearest(x) -> np.ndarray:
    """Repeat every spatial voxel twice along each spatial axis."""
    out = np.asarray(x)
    for axis in range(1, out.ndim):
        out = np.repeat(out, 2, axis=axis)
    return out


def upsample_nearest_backward(upstream) -> np.ndarray:
    """Sum ``upstream`` over each 2**n block (adjoint of :func:`upsample_nearest`)."""
    g = np.asarray(upstream)
    n = g.ndim - 1
    if any(s % 2 for s in g.shape[1:]):
        raise ValueError("upstream spatial dims must be even")
    shape = [g.shape[0]]
    for s in g.shape[1:]:
        shape += [s // 2, 2]
    return g.reshape(shape).sum(axis=tuple(range(2, 2 * n + 1, 2)))


def concat_channels(a, b) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape[1:] != b.shape[1:]:
        raise ValueError(f"spatial mismatch: {a.shape[1:]} vs {b.shape[1:]}")
    return np.concatenate([a, b], axis=0)


def concat_channels_backward(upstream, a_channels: int):
    upstream = np.asarray(upstream)
    return upstream[:a_channels], upstream[a_channels:]


@dataclass
class FDReport:
    """Max relative error of the vjp against central differences, per input."""

    errors: list[float]
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(e < self.tolerance for e in self.errors)

    @property
    def max_error(self) -> float:
        return max(self.errors) if self.errors else 0.0


def _rel_error(analytic: float, numeric: float) -> float:
    scale = max(abs(analytic), abs(numeric))
    if scale < 1e-10:
        return abs(analytic - numeric)
    return abs(analytic - numeric) / scale


def finite_diff_check(
    forward: Callable[..., np.ndarray],
    vjp: Callable[..., Sequence[np.ndarray]],
    inputs: Sequence[np.ndarray],
    step: float = 1e-5,
    tolerance: float = 1e-4,
    n_directions: int = 3,
    seed: int = 0,
) -> FDReport:
    """Compare ``vjp`` against central differences of ``forward``.

    ``forward(*inputs)`` returns an array and ``vjp(*inputs, upstream)``
    returns one gradient per input. For random upstream ``w`` and random
    directions ``v`` the directional derivative of ``<w, forward>`` along
    ``v`` is estimated by central differences and compared with
    ``<vjp_i, v>``.
    """
    rng = np.random.Generator(np.random.Philox(seed))
    inputs = [np.array(x, dtype=np.float64) for x in inputs]
    out = np.asarray(forward(*inputs))
    errors = []
    for _ in range(n_directions):
        w = rng.standard_normal(out.shape)
        grads = vjp(*inputs, w)
        for i, x in enumerate(inputs):
            if len(errors) <= i:
                errors.append(0.0)
            v = rng.standard_normal(x.shape)
            plus = [y.copy() for y in inputs]
            minus = [y.copy() for y in inputs]
            plus[i] = x + step * v
            minus[i] = x - step * v
            numeric = (np.vdot(w, forward(*plus)) - np.vdot(w, forward(*minus))) / (2 * step)
            analytic = float(np.vdot(np.asarray(grads[i]), v))
            errors[i] = max(errors[i], _rel_error(analytic, numeric))
    return FDReport(errors, tolerance)
