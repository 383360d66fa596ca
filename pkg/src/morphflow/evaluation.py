"""Dice overlap, structure filtering, runtime benchmarks and field images."""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .loss import diffusion_reg
from .warp import identity_field, sample_nearest

__all__ = [
    "dice",
    "filter_structures",
    "DiceReport",
    "evaluate_registration",
    "network_field_source",
    "identity_field_source",
    "gt_field_source",
    "BenchmarkStats",
    "benchmark_runtime",
    "write_benchmark_csv",
    "field_to_rgb",
    "export_field_rgb",
]


def dice(a, b, label: int) -> float:
    """Overlap ``2|A & B| / (|A| + |B|)``; 1 when both sets are empty."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if label <= 0:
        raise ValueError("label must be positive (0 is background)")
    in_a = a == label
    in_b = b == label
    size = int(in_a.sum()) + int(in_b.sum())
    if size == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(in_a & in_b)) / size


def filter_structures(segs: Iterable, min_voxels: int = 100) -> list[int]:
    """Labels with at least ``min_voxels`` voxels in every map."""
    keep = None
    for s in segs:
        labels, counts = np.unique(np.asarray(s), return_counts=True)
        big = {int(l) for l, c in zip(labels, counts) if l > 0 and c >= min_voxels}
        keep = big if keep is None else keep & big
    return sorted(keep) if keep else []


@dataclass
class DiceReport:
    """Per (subject, label) Dice plus per-field smoothness energy."""

    rows: list[tuple[str, int, float]] = field(default_factory=list)
    smoothness: list[float] = field(default_factory=list)

    @property
    def values(self) -> np.ndarray:
        return np.array([r[2] for r in self.rows])

    @property
    def mean(self) -> float:
        return float(self.values.mean()) if self.rows else float("nan")

    @property
    def sd(self) -> float:
        return float(self.values.std()) if self.rows else float("nan")

    @property
    def mean_smoothness(self) -> float:
        return float(np.mean(self.smoothness)) if self.smoothness else float("nan")

    def per_label(self, merge: dict[int, int] | None = None) -> dict[int, float]:
        """Mean Dice per label; ``merge`` maps labels onto a shared group id."""
        groups: dict[int, list[float]] = {}
        for _, label, d in self.rows:
            key = merge.get(label, label) if merge else label
            groups.setdefault(key, []).append(d)
        return {k: float(np.mean(v)) for k, v in sorted(groups.items())}

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["subject", "label", "dice"])
            for subject, label, d in self.rows:
                w.writerow([subject, label, repr(d)])

    def write_summary_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "mean", "sd"])
            w.writerow(["dice", repr(self.mean), repr(self.sd)])
            sm = np.array(self.smoothness) if self.smoothness else np.array([np.nan])
            w.writerow(["smooth_energy", repr(float(sm.mean())), repr(float(sm.std()))])


def identity_field_source(pair) -> np.ndarray:
    return identity_field(pair.fixed.shape)


def gt_field_source(pair) -> np.ndarray:
    """The registration that undoes the synthetic warp (needs ``gt_field``)."""
    from .synth import approximate_inverse

    return approximate_inverse(pair.gt_field)


def network_field_source(params) -> Callable:
    from .network import forward

    def source(pair):
        u, _ = forward(params, pair.fixed, pair.moving)
        return u.astype(np.float64)

    return source


def evaluate_registration(source: Callable, pairs: Sequence, min_voxels: int = 100) -> DiceReport:
    """Register each pair with ``source(pair) -> field`` and score warped labels.

    Structures are the labels with at least ``min_voxels`` voxels in every
    fixed and moving map of the set.
    """
    pairs = list(pairs)
    for p in pairs:
        if p.seg_fixed is None or p.seg_moving is None:
            raise ValueError(f"pair {p.name!r} has no segmentations")
    labels = filter_structures(
        [p.seg_fixed for p in pairs] + [p.seg_moving for p in pairs], min_voxels
    )
    report = DiceReport()
    for i, p in enumerate(pairs):
        u = source(p)
        warped = sample_nearest(p.seg_moving, u)
        name = p.name or str(i)
        for label in labels:
            report.rows.append((name, label, dice(warped, p.seg_fixed, label)))
        report.smoothness.append(diffusion_reg(u))
    return report


@dataclass
class BenchmarkStats:
    method: str
    times_ms: list[float]

    @property
    def median_ms(self) -> float:
        return float(np.median(self.times_ms)) if self.times_ms else float("nan")

    @property
    def sd_ms(self) -> float:
        return float(np.std(self.times_ms)) if self.times_ms else float("nan")


def benchmark_runtime(methods: dict[str, Callable], pairs: Sequence, repetitions: int = 3) -> list[BenchmarkStats]:
    """Wall time of each ``method(pair)``: one untimed warmup, then ``repetitions`` timed runs per pair.

    Statistics pool all timed runs over all pairs. Empty ``pairs`` gives
    empty stats.
    """
    if repetitions < 3:
        raise ValueError("repetitions must be >= 3")
    stats = []
    for name, fn in methods.items():
        times = []
        for p in pairs:
            fn(p)
            for _ in range(repetitions):
                t0 = time.perf_counter()
                fn(p)
                times.append(1e3 * (time.perf_counter() - t0))
        stats.append(BenchmarkStats(name, times))
    return stats


def write_benchmark_csv(stats: Sequence[BenchmarkStats], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "median_ms", "sd_ms"])
        for s in stats:
            w.writerow([s.method, repr(s.median_ms), repr(s.sd_ms)])


def field_to_rgb(u: np.ndarray, clip: float = 10.0) -> np.ndarray:
    """Map a 2-D slice of offsets ``(n, H, W)`` to uint8 RGB.

    Offsets are clipped to ``[-clip, clip]`` and rescaled to [0, 1]. Red
    holds the x (fastest-axis) offset, green y, blue z; a 2-D field leaves
    blue at zero.
    """
    u = np.asarray(u, dtype=np.float64)
    n = u.shape[0]
    scaled = (np.clip(u, -clip, clip) + clip) / (2 * clip)
    rgb = np.zeros(u.shape[1:] + (3,))
    for c in range(n):
        rgb[..., c] = scaled[n - 1 - c]
    return np.round(rgb * 255).astype(np.uint8)


def export_field_rgb(u, axis: int, index: int, path) -> np.ndarray:
    """Write one slice of a field as a PNG; returns the RGB array.

    For 2-D fields the whole field is the slice and ``axis``/``index`` must be
    0. For 3-D fields the slice is taken at ``index`` along spatial ``axis``.
    """
    from PIL import Image

    u = np.asarray(u)
    n = u.shape[0]
    if n == 2:
        if axis != 0 or index != 0:
            raise ValueError("2-D fields have a single slice (axis 0, index 0)")
        sl = u
    elif n == 3:
        if axis not in (0, 1, 2) or not 0 <= index < u.shape[axis + 1]:
            raise ValueError(f"invalid slice: axis {axis}, index {index} for shape {u.shape[1:]}")
        sl = np.take(u, index, axis=axis + 1)
    else:
        raise ValueError("field must be 2-D or 3-D")
    rgb = field_to_rgb(sl)
    Image.fromarray(rgb, mode="RGB").save(path, format="PNG")
    return rgb
