"""Encoder-decoder registration network built from :mod:`morphflow.diffops`.

The input is the moving and fixed image stacked as two channels (moving
first). The encoder halves the resolution with stride-2 convolutions; the
decoder alternates convolution, nearest upsampling and concatenation with the
encoder feature map of matching resolution, then refines at full resolution
and emits an ``n``-channel displacement field through an activation-free
convolution.
"""
from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import diffops

__all__ = [
    "ArchConfig",
    "NetworkParams",
    "ForwardCache",
    "CheckpointError",
    "model1",
    "model2",
    "build_network",
    "forward",
    "backward",
    "receptive_field",
    "save_params",
    "load_params",
]

CHECKPOINT_MAGIC = b"MORPHFLOW-CKPT\n"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ArchConfig:
    """Layer layout of the registration network.

    The first ``len(encoder_channels)`` decoder entries are convolutions at
    successively finer levels (coarsest first), each followed by upsampling
    and a skip concatenation. Remaining decoder entries are full-resolution
    convolutions; ``extra_full_res_layer`` appends one more with the width of
    the last decoder layer.
    """

    spatial_rank: int = 3
    encoder_channels: tuple[int, ...] = (16, 32, 32, 32)
    decoder_channels: tuple[int, ...] = (32, 32, 32, 8, 8)
    extra_full_res_layer: bool = False
    leaky_slope: float = 0.2
    kernel_size: int = 3

    def __post_init__(self):
        object.__setattr__(self, "encoder_channels", tuple(int(c) for c in self.encoder_channels))
        object.__setattr__(self, "decoder_channels", tuple(int(c) for c in self.decoder_channels))
        if self.spatial_rank not in (2, 3):
            raise ValueError("spatial_rank must be 2 or 3")
        if not self.encoder_channels:
            raise ValueError("need at least one encoder level")
        if len(self.decoder_channels) < len(self.encoder_channels):
            raise ValueError("decoder needs at least one layer per encoder level")
        if any(c < 1 for c in self.encoder_channels + self.decoder_channels):
            raise ValueError("channel counts must be positive")
        if not 0 < self.leaky_slope < 1:
            raise ValueError("leaky_slope must lie in (0, 1)")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")

    @property
    def levels(self) -> int:
        return len(self.encoder_channels)

    @property
    def final_field_channels(self) -> int:
        return self.spatial_rank

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        return cls(**d)


def model1(spatial_rank: int = 3) -> ArchConfig:
    return ArchConfig(spatial_rank, (16, 32, 32, 32), (32, 32, 32, 8, 8), False)


def model2(spatial_rank: int = 3) -> ArchConfig:
    return ArchConfig(spatial_rank, (16, 32, 32, 32), (32, 32, 32, 32, 16, 16), True)


def _layer_shapes(arch: ArchConfig) -> list[tuple[int, int]]:
    """(in, out) channel pairs in parameter order: encoder, decoder, extra, field."""
    L = arch.levels
    enc, dec = arch.encoder_channels, arch.decoder_channels
    skip = (2,) + enc  # channels of the feature map at each level
    shapes = []
    c = 2
    for out in enc:
        shapes.append((c, out))
        c = out
    for j in range(L):
        shapes.append((c, dec[j]))
        c = dec[j] + skip[L - j - 1]
    for out in dec[L:]:
        shapes.append((c, out))
        c = out
    if arch.extra_full_res_layer:
        shapes.append((c, dec[-1]))
        c = dec[-1]
    shapes.append((c, arch.spatial_rank))
    return shapes


@dataclass
class NetworkParams:
    arch: ArchConfig
    kernels: list[diffops.ConvKernel]
    seed: int | None = None

    @property
    def dtype(self):
        return self.kernels[0].weight.dtype

    def arrays(self) -> list[np.ndarray]:
        """Flat parameter list: weight, bias, weight, bias, ..."""
        out = []
        for k in self.kernels:
            out += [k.weight, k.bias]
        return out

    def with_arrays(self, arrays) -> "NetworkParams":
        arrays = list(arrays)
        kernels = [
            diffops.ConvKernel(arrays[2 * i], arrays[2 * i + 1]) for i in range(len(self.kernels))
        ]
        return NetworkParams(self.arch, kernels, self.seed)

    @property
    def count(self) -> int:
        return int(sum(a.size for a in self.arrays()))

    def astype(self, dtype) -> "NetworkParams":
        return self.with_arrays([a.astype(dtype) for a in self.arrays()])


def build_network(arch: ArchConfig, seed: int = 0, dtype=np.float32) -> NetworkParams:
    """Initialise parameters: He-uniform hidden layers, tiny final layer.

    The field layer starts at 1e-3 scale so the untrained network outputs an
    almost-zero displacement.
    """
    rng = np.random.Generator(np.random.Philox(seed))
    extent = (arch.kernel_size,) * arch.spatial_rank
    shapes = _layer_shapes(arch)
    gain = np.sqrt(2.0 / (1.0 + arch.leaky_slope ** 2))
    kernels = []
    for i, (c_in, c_out) in enumerate(shapes):
        fan_in = c_in * int(np.prod(extent))
        bound = 1e-3 if i == len(shapes) - 1 else gain * np.sqrt(3.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(c_out, c_in) + extent).astype(dtype)
        kernels.append(diffops.ConvKernel(w, np.zeros(c_out, dtype=dtype)))
    return NetworkParams(arch, kernels, seed)


def receptive_field(arch: ArchConfig) -> int:
    """Input-voxel width seen by one unit of the coarsest decoder convolution."""
    k = arch.kernel_size
    size, jump = 1, 1
    for _ in range(arch.levels):
        size += (k - 1) * jump
        jump *= 2
    return size + (k - 1) * jump


@dataclass
class ForwardCache:
    params: NetworkParams
    tape: list = field(default_factory=list)


def _conv(cache, h, kernel, stride, act, slope):
    pre, cols = diffops.conv_forward(h, kernel, stride, return_cols=True)
    out = diffops.leaky_relu_forward(pre, slope) if act else pre
    cache.tape.append(("conv", h.shape, cols, pre if act else None, stride))
    return out


def forward(params: NetworkParams, f, m):
    """Predict the displacement field for fixed ``f`` and moving ``m``."""
    arch = params.arch
    f = np.asarray(f)
    m = np.asarray(m)
    if f.shape != m.shape:
        raise ValueError(f"shape mismatch: fixed {f.shape} vs moving {m.shape}")
    if f.ndim != arch.spatial_rank:
        raise ValueError(f"network expects {arch.spatial_rank}-D inputs, got {f.ndim}-D")
    div = 2 ** arch.levels
    if any(s % div for s in f.shape):
        raise ValueError(f"input dims {f.shape} must be divisible by {div}")
    L = arch.levels
    slope = arch.leaky_slope
    ks = params.kernels
    cache = ForwardCache(params)
    h = np.stack([m, f]).astype(params.dtype, copy=False)
    skips = [h]
    for i in range(L):
        h = _conv(cache, h, ks[i], 2, True, slope)
        skips.append(h)
    for j in range(L):
        h = _conv(cache, h, ks[L + j], 1, True, slope)
        h = diffops.upsample_nearest(h)
        cache.tape.append(("cat", h.shape[0], L - j - 1))
        h = diffops.concat_channels(h, skips[L - j - 1])
    for k in ks[2 * L : -1]:
        h = _conv(cache, h, k, 1, True, slope)
    field_ = _conv(cache, h, ks[-1], 1, False, slope)
    return field_, cache


def backward(params: NetworkParams, cache: ForwardCache, grad_field):
    """Parameter gradients of ``<grad_field, forward(params, ...)>``.

    Returned in the same flat order as :meth:`NetworkParams.arrays`.
    """
    if cache.params is not params:
        raise ValueError("stale cache: it was produced with different parameters")
    arch = params.arch
    L = arch.levels
    slope = arch.leaky_slope
    ks = params.kernels
    grads = [None] * (2 * len(ks))
    skip_grads: dict[int, np.ndarray] = {}
    g = np.asarray(grad_field, dtype=params.dtype)
    layer = len(ks)
    for entry in reversed(cache.tape):
        if entry[0] == "cat":
            _, up_channels, level = entry
            g_up, g_skip = diffops.concat_channels_backward(g, up_channels)
            skip_grads[level] = g_skip
            g = diffops.upsample_nearest_backward(g_up)
            continue
        _, in_shape, cols, pre, stride = entry
        layer -= 1
        if layer < L and layer + 1 in skip_grads:
            # encoder output also feeds a skip connection
            g = g + skip_grads.pop(layer + 1)
        if pre is not None:
            g = diffops.leaky_relu_backward(pre, slope, g)
        k = ks[layer]
        g_out, gw, gb = _conv_grads(in_shape, k, stride, g, cols, need_input=layer > 0)
        grads[2 * layer] = gw
        grads[2 * layer + 1] = gb
        g = g_out
    return grads


def _conv_grads(in_shape, k, stride, g, cols, need_input):
    gmat = g.reshape(k.out_channels, -1)
    gw = (gmat @ cols.T).reshape(k.weight.shape)
    gb = gmat.sum(axis=1)
    if not need_input:
        return None, gw, gb
    dummy = np.broadcast_to(np.zeros((), dtype=g.dtype), in_shape)
    gx, _, _ = diffops.conv_backward(dummy, k, stride, g, cols=cols)
    return gx, gw, gb


def save_params(params: NetworkParams, path, dtype=None) -> None:
    """Write a checkpoint: magic line, JSON header line, raw little-endian blob.

    The blob is float32 unless the parameters (or ``dtype``) are float64.
    """
    dtype = np.dtype(dtype or (np.float64 if params.dtype == np.float64 else np.float32))
    blob = b"".join(
        np.ascontiguousarray(a, dtype=dtype.newbyteorder("<")).tobytes() for a in params.arrays()
    )
    header = {
        "format_version": CHECKPOINT_VERSION,
        "arch": params.arch.to_dict(),
        "seed": params.seed,
        "dtype": dtype.name,
        "shapes": [list(a.shape) for a in params.arrays()],
        "nbytes": len(blob),
        "crc32": zlib.crc32(blob),
    }
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(blob)


def load_params(path, spatial_rank: int | None = None, dtype=None) -> NetworkParams:
    """Read a checkpoint written by :func:`save_params`.

    Raises :class:`CheckpointError` on a corrupt file, an unknown format
    version, inconsistent shapes, or (when given) a ``spatial_rank`` that
    differs from the stored architecture.
    """
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a morphflow checkpoint")
    rest = raw[len(CHECKPOINT_MAGIC) :]
    line_end = rest.find(b"\n")
    if line_end < 0:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(rest[:line_end])
        version = header["format_version"]
        arch = ArchConfig.from_dict(header["arch"])
        shapes = [tuple(s) for s in header["shapes"]]
        blob_dtype = np.dtype(header["dtype"]).newbyteorder("<")
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: cannot parse header: {exc}") from exc
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    if spatial_rank is not None and arch.spatial_rank != spatial_rank:
        raise CheckpointError(
            f"{path}: checkpoint is {arch.spatial_rank}-D, run is {spatial_rank}-D"
        )
    blob = rest[line_end + 1 :]
    if len(blob) != header.get("nbytes") or zlib.crc32(blob) != header.get("crc32"):
        raise CheckpointError(f"{path}: parameter blob is corrupt or truncated")
    expected = []
    for c_in, c_out in _layer_shapes(arch):
        expected += [(c_out, c_in) + (arch.kernel_size,) * arch.spatial_rank, (c_out,)]
    if shapes != expected:
        raise CheckpointError(f"{path}: layer shapes do not match the stored architecture")
    arrays, offset = [], 0
    for shape in shapes:
        count = int(np.prod(shape))
        a = np.frombuffer(blob, dtype=blob_dtype, count=count, offset=offset).reshape(shape)
        offset += count * blob_dtype.itemsize
        arrays.append(a.astype(dtype or blob_dtype.newbyteorder("=")))
    kernels = [diffops.ConvKernel(arrays[2 * i], arrays[2 * i + 1]) for i in range(len(shapes) // 2)]
    return NetworkParams(arch, kernels, header.get("seed"))
