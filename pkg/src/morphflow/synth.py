"""Synthetic phantoms, smooth random warps and atlas-style pair datasets.

All randomness goes through ``numpy.random.Philox`` seeded from
``SeedSequence`` so datasets are bit-reproducible across platforms.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .volume_io import (
    load_field,
    load_segmentation,
    load_volume,
    save_field,
    save_segmentation,
    save_volume,
)
from .warp import sample_linear, sample_nearest

__all__ = [
    "PhantomSpec",
    "Pair",
    "make_phantom",
    "make_random_smooth_field",
    "generate_pair",
    "approximate_inverse",
    "write_dataset",
    "load_manifest",
]


def _rng(*key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(list(key))))


@dataclass(frozen=True)
class PhantomSpec:
    shape: tuple[int, ...] = (32, 32, 32)
    n_structures: int = 4
    deform_amplitude: float = 5.0
    deform_smoothness: float = 4.0
    seed: int = 0
    min_voxels: int = 100
    elongation: float = 0.6
    shell_width: int = 3

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        if self.deform_amplitude < 0:
            raise ValueError("deform_amplitude must be >= 0")
        if not self.deform_smoothness > 0:
            raise ValueError("deform_smoothness must be > 0")
        if self.n_structures < 1:
            raise ValueError("n_structures must be >= 1")
        if self.elongation < 0:
            raise ValueError("elongation must be >= 0")
        if any(s < 1 for s in self.shape):
            raise ValueError("shape dims must be positive")


def make_phantom(spec: PhantomSpec, max_tries: int = 500):
    """Return ``(intensity, labels)`` for a blob phantom.

    Each structure is a Gaussian bump with a blurred-noise perturbation,
    thresholded to a connected-looking region at least ``spec.min_voxels``
    large and kept apart from earlier structures. Intensity is a smooth
    background texture plus one distinct level per structure, lightly
    blurred and rescaled to [0, 1].
    """
    rng = _rng(spec.seed, 0)
    shape = spec.shape
    ndim = len(shape)
    grids = np.indices(shape, dtype=np.float64)
    labels = np.zeros(shape, dtype=np.int32)
    occupied = np.zeros(shape, dtype=bool)
    # smallest radius whose ball holds min_voxels, with a little headroom
    ball = np.pi if ndim == 2 else 4.0 / 3.0 * np.pi
    r_lo = 1.15 * (spec.min_voxels / ball) ** (1.0 / ndim) if ndim in (2, 3) else 2.0
    r_hi = 1.3 * r_lo
    for k in range(1, spec.n_structures + 1):
        for _ in range(max_tries):
            shell = spec.shell_width > 0 and k % 2 == 0
            radius = rng.uniform(r_lo, r_hi) * (1.7 if shell else 1.0)
            center = [rng.uniform(radius, s - 1 - radius) if s - 1 > 2 * radius else (s - 1) / 2 for s in shape]
            # random orientation, axis ratios with unit product
            axes = np.exp(rng.uniform(-spec.elongation, spec.elongation, ndim))
            axes /= np.prod(axes) ** (1.0 / ndim)
            rot, _ = np.linalg.qr(rng.standard_normal((ndim, ndim)))
            offsets = np.tensordot(rot.T, np.stack([g - c for g, c in zip(grids, center)]), axes=1)
            d2 = sum((o / a) ** 2 for o, a in zip(offsets, axes))
            bump = np.exp(-d2 / (2 * radius ** 2))
            wobble = ndimage.gaussian_filter(rng.standard_normal(shape), radius / 3, mode="nearest")
            wobble *= 0.3 / max(np.abs(wobble).max(), 1e-12)
            region = (bump + wobble) > np.exp(-0.5)
            if shell:
                region &= ~ndimage.binary_erosion(region, iterations=spec.shell_width)
            # two-voxel gap between structures
            if np.any(region & ndimage.binary_dilation(occupied, iterations=2)):
                continue
            if region.sum() < spec.min_voxels:
                continue
            labels[region] = k
            occupied |= region
            break
        else:
            raise ValueError(
                f"cannot place {spec.n_structures} structures of >= {spec.min_voxels} voxels in shape {shape}"
            )
    levels = np.linspace(0.45, 1.0, spec.n_structures)
    rng.shuffle(levels)
    texture = ndimage.gaussian_filter(rng.standard_normal(shape), 2.0, mode="nearest")
    texture *= 0.1 / max(np.abs(texture).max(), 1e-12)
    image = 0.15 + texture
    for k in range(1, spec.n_structures + 1):
        image[labels == k] += levels[k - 1]
    image = ndimage.gaussian_filter(image, 0.75, mode="nearest")
    image = (image - image.min()) / (image.max() - image.min())
    return image, labels


def make_random_smooth_field(shape, amplitude: float, smoothness: float, seed: int) -> np.ndarray:
    """Gaussian-blurred white noise per channel, rescaled to max |u| = amplitude."""
    if amplitude < 0:
        raise ValueError("amplitude must be >= 0")
    shape = tuple(int(s) for s in shape)
    if amplitude == 0:
        return np.zeros((len(shape),) + shape)
    rng = _rng(seed, 1)
    u = np.stack(
        [ndimage.gaussian_filter(rng.standard_normal(shape), smoothness, mode="wrap") for _ in shape]
    )
    peak = np.sqrt((u ** 2).sum(axis=0)).max()
    return u * (amplitude / peak)


def generate_pair(spec: PhantomSpec, field_seed: int | None = None):
    """Return ``(F, M, seg_F, seg_M, gt_field)`` with ``M = F`` warped by ``gt_field``.

    ``field_seed`` defaults to ``spec.seed``; datasets keep the atlas
    (``spec.seed``) fixed and vary only the warp.
    """
    f, seg_f = make_phantom(spec)
    seed = spec.seed if field_seed is None else field_seed
    gt = make_random_smooth_field(spec.shape, spec.deform_amplitude, spec.deform_smoothness, seed)
    m = sample_linear(f, gt)
    seg_m = sample_nearest(seg_f, gt)
    return f, m, seg_f, seg_m, gt


def approximate_inverse(u: np.ndarray, iterations: int = 30) -> np.ndarray:
    """Fixed-point inverse ``v(p) = -u(p + v(p))`` of a small smooth field.

    Used to build the registration that undoes a ground-truth warp.
    """
    v = -np.asarray(u, dtype=np.float64)
    for _ in range(iterations):
        v = -np.stack([sample_linear(u[d], v) for d in range(u.shape[0])])
    return v


@dataclass
class Pair:
    fixed: np.ndarray
    moving: np.ndarray
    seg_fixed: np.ndarray | None = None
    seg_moving: np.ndarray | None = None
    gt_field: np.ndarray | None = None
    name: str = ""


def write_dataset(out_dir, spec: PhantomSpec, n_pairs: int, splits: dict[str, int] | None = None):
    """Write an atlas plus ``n_pairs`` warped copies in the native format.

    Emits ``manifest.json`` listing every pair and, when ``splits`` is given
    (e.g. ``{"train": 40, "val": 10, "test": 10}``), one
    ``<split>.json`` manifest per consecutive block of pairs. Manifest paths
    are relative to the manifest's directory.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    f, seg_f = make_phantom(spec)
    save_volume(f.astype(np.float32), out / "atlas.vol")
    save_segmentation(seg_f, out / "atlas.seg")
    entries = []
    for i in range(n_pairs):
        field_seed = int(np.random.SeedSequence([spec.seed, 2, i]).generate_state(1)[0])
        gt = make_random_smooth_field(spec.shape, spec.deform_amplitude, spec.deform_smoothness, field_seed)
        m = sample_linear(f, gt)
        seg_m = sample_nearest(seg_f, gt)
        stem = f"pair{i:04d}"
        save_volume(m.astype(np.float32), out / f"{stem}_moving.vol")
        save_segmentation(seg_m, out / f"{stem}_moving.seg")
        save_field(gt.astype(np.float32), out / f"{stem}_gt.vol")
        entries.append(
            {
                "fixed": "atlas.vol",
                "moving": f"{stem}_moving.vol",
                "seg_fixed": "atlas.seg",
                "seg_moving": f"{stem}_moving.seg",
                "gt_field": f"{stem}_gt.vol",
            }
        )
    manifests = {"manifest": entries}
    if splits:
        if sum(splits.values()) > n_pairs:
            raise ValueError("splits ask for more pairs than generated")
        start = 0
        for name, count in splits.items():
            manifests[name] = entries[start : start + count]
            start += count
    for name, items in manifests.items():
        with open(out / f"{name}.json", "w") as fh:
            json.dump(items, fh, indent=1)
            fh.write("\n")
    return out / "manifest.json"


def load_manifest(path, dtype=np.float64) -> list[Pair]:
    """Load every pair of a manifest; optional keys may be absent or null."""
    path = Path(path)
    with open(path) as fh:
        entries = json.load(fh)
    if not isinstance(entries, list):
        raise ValueError(f"{path}: manifest must be a JSON list")
    base = path.parent
    cache: dict[str, np.ndarray] = {}

    def get(rel, loader):
        if rel is None:
            return None
        key = str(base / rel)
        if key not in cache:
            cache[key] = loader(base / rel)
        return cache[key]

    pairs = []
    for e in entries:
        pairs.append(
            Pair(
                fixed=get(e["fixed"], lambda p: load_volume(p, dtype=dtype).data),
                moving=get(e["moving"], lambda p: load_volume(p, dtype=dtype).data),
                seg_fixed=get(e.get("seg_fixed"), lambda p: load_segmentation(p).labels),
                seg_moving=get(e.get("seg_moving"), lambda p: load_segmentation(p).labels),
                gt_field=get(e.get("gt_field"), lambda p: load_field(p, dtype=dtype)),
                name=e["moving"],
            )
        )
    return pairs
