"""Per-pair variational registration: gradient descent on the same energy.

Coarse-to-fine: images are block-averaged down the pyramid, the field is
optimised at the coarsest level first and handed to the next level by
nearest upsampling with doubled offsets.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .loss import LossConfig, total_loss
from .warp import identity_field

__all__ = ["VarOptConfig", "EnergyStep", "downsample_avg", "upsample_field", "optimize_pair"]


@dataclass(frozen=True)
class VarOptConfig:
    """``iterations`` is per level, either one int or one entry per level (coarsest first)."""

    iterations: int | Sequence[int] = 100
    step_size: float = 0.05
    levels: int = 3
    loss: LossConfig = field(default_factory=LossConfig)
    max_halvings: int = 10
    target_energy: float | None = None

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if not self.step_size > 0:
            raise ValueError("step_size must be > 0")
        if not isinstance(self.iterations, int) and len(self.iterations) != self.levels:
            raise ValueError("need one iteration count per level")

    def iterations_at(self, level: int) -> int:
        if isinstance(self.iterations, int):
            return self.iterations
        return int(self.iterations[level])


@dataclass(frozen=True)
class EnergyStep:
    level: int
    iteration: int
    energy: float
    step: float


def downsample_avg(v) -> np.ndarray:
    """Mean over each 2**n block; every dim must be even."""
    v = np.asarray(v)
    if any(s % 2 for s in v.shape):
        raise ValueError(f"odd dims {v.shape} cannot be halved")
    shape = []
    for s in v.shape:
        shape += [s // 2, 2]
    return v.reshape(shape).mean(axis=tuple(range(1, 2 * v.ndim, 2)))


def upsample_field(u) -> np.ndarray:
    """Nearest ×2 upsampling of an ``(n, *shape)`` field with offsets doubled."""
    u = np.asarray(u)
    out = u
    for axis in range(1, u.ndim):
        out = np.repeat(out, 2, axis=axis)
    return 2.0 * out


def optimize_pair(f, m, cfg: VarOptConfig = VarOptConfig()):
    """Return ``(field, energy_log)`` minimising the registration energy for one pair.

    Every iteration takes a gradient step and halves the step until the
    energy decreases (at most ``cfg.max_halvings`` times); a level ends early
    when no decrease is found. After a success the next trial step doubles,
    capped at ``cfg.step_size``. With ``cfg.target_energy`` set, optimisation
    stops as soon as the full-resolution energy reaches it.
    """
    f = np.asarray(f, dtype=np.float64)
    m = np.asarray(m, dtype=np.float64)
    if f.shape != m.shape:
        raise ValueError(f"shape mismatch: {f.shape} vs {m.shape}")
    div = 2 ** (cfg.levels - 1)
    if any(s % div for s in f.shape):
        raise ValueError(f"dims {f.shape} must be divisible by {div}")
    pyramid = [(f, m)]
    for _ in range(cfg.levels - 1):
        pyramid.append((downsample_avg(pyramid[-1][0]), downsample_avg(pyramid[-1][1])))
    pyramid.reverse()

    log: list[EnergyStep] = []
    u = identity_field(pyramid[0][0].shape)
    for level, (fl, ml) in enumerate(pyramid):
        if level:
            u = upsample_field(u)
        finest = level == cfg.levels - 1
        n_iter = cfg.iterations_at(level)
        if n_iter == 0:
            continue
        energy, grad = total_loss(fl, ml, u, cfg.loss)
        _check_finite(energy)
        step = cfg.step_size
        for it in range(n_iter):
            if finest and cfg.target_energy is not None and energy <= cfg.target_energy:
                break
            for _ in range(cfg.max_halvings + 1):
                trial = u - step * grad
                trial_energy, trial_grad = total_loss(fl, ml, trial, cfg.loss)
                _check_finite(trial_energy)
                if trial_energy < energy:
                    break
                step *= 0.5
            else:
                break
            u, energy, grad = trial, trial_energy, trial_grad
            log.append(EnergyStep(level, it, energy, step))
            step = min(2.0 * step, cfg.step_size)
    return u, log


def _check_finite(energy):
    if not np.isfinite(energy):
        raise FloatingPointError("non-finite energy during optimisation")
