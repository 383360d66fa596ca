"""Amortised training of the registration network, model selection and lambda sweeps."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .evaluation import evaluate_registration, network_field_source
from .loss import LossConfig, total_loss
from .network import ArchConfig, NetworkParams, backward, build_network, forward, load_params, model1, save_params
from .synth import Pair, load_manifest

__all__ = [
    "TrainConfig",
    "AdamState",
    "adam_step",
    "TrainingError",
    "TrainResult",
    "train",
    "write_log_csv",
    "select_model",
    "sweep_lambda",
    "write_sweep_csv",
]

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    iterations: int = 1000
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    arch: ArchConfig = field(default_factory=model1)
    checkpoint_interval: int = 0
    train_manifest: str | None = None
    val_manifest: str | None = None
    out_dir: str | None = None
    dtype: str = "float32"

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.checkpoint_interval < 0:
            raise ValueError("checkpoint_interval must be >= 0")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["loss"] = {"lambda": self.loss.lam, "cc_window": self.loss.cc_window, "epsilon": self.loss.epsilon}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "loss" in d:
            ld = dict(d["loss"])
            if "lambda" in ld:
                ld["lam"] = ld.pop("lambda")
            d["loss"] = LossConfig(**ld)
        if "arch" in d:
            d["arch"] = ArchConfig.from_dict(d["arch"])
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray], **kw) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **kw)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState, lr: float):
    """One bias-corrected Adam update; returns ``(new_params, new_state)``.

    Inputs are left untouched. A non-finite gradient raises
    ``FloatingPointError`` and no update is made.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and state must have the same length")
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ValueError(f"gradient {i} has shape {g.shape}, parameter has {p.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"step rejected: non-finite gradient in parameter {i}")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    new_m, new_v, new_p = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        update = lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        new_m.append(m)
        new_v.append(v)
        new_p.append((p - update).astype(p.dtype, copy=False))
    return new_p, dataclasses.replace(state, m=new_m, v=new_v, step=t)


class TrainingError(RuntimeError):
    def __init__(self, message, last_checkpoint=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


@dataclass
class TrainResult:
    params: NetworkParams
    log: list[dict]
    checkpoints: list[Path]


def _check_pairs(pairs: Sequence[Pair]):
    if not pairs:
        raise ValueError("dataset is empty")
    shape = pairs[0].fixed.shape
    for p in pairs:
        if p.fixed.shape != shape or p.moving.shape != shape:
            raise ValueError(f"shape inconsistency: {p.name} is {p.moving.shape}, expected {shape}")


def train(cfg: TrainConfig, pairs: Sequence[Pair] | None = None, init: NetworkParams | None = None) -> TrainResult:
    """Minimise the expected registration loss over ``pairs`` with Adam.

    Each iteration draws one pair uniformly with replacement, so with an
    atlas dataset the fixed image is always the atlas. ``pairs`` defaults to
    the contents of ``cfg.train_manifest``. Checkpoints are written to
    ``cfg.out_dir`` every ``cfg.checkpoint_interval`` iterations and after the
    last one. A non-finite loss aborts with :class:`TrainingError`.
    """
    if pairs is None:
        if cfg.train_manifest is None:
            raise ValueError("no training pairs and no train_manifest")
        pairs = load_manifest(cfg.train_manifest)
    pairs = list(pairs)
    _check_pairs(pairs)
    dtype = np.dtype(cfg.dtype)
    params = init if init is not None else build_network(cfg.arch, cfg.seed, dtype)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([cfg.seed, 3])))
    state = AdamState.zeros_like(params.arrays())
    out_dir = Path(cfg.out_dir) if cfg.out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    history: list[dict] = []
    checkpoints: list[Path] = []

    def checkpoint(it):
        if out_dir is None:
            return
        path = out_dir / f"ckpt_{it:06d}.ckpt"
        save_params(params, path)
        checkpoints.append(path)

    for it in range(1, cfg.iterations + 1):
        t0 = time.perf_counter()
        pair = pairs[int(rng.integers(len(pairs)))]
        u, cache = forward(params, pair.fixed, pair.moving)
        finite = np.all(np.isfinite(u))
        if finite:
            terms, grad_u = total_loss(pair.fixed, pair.moving, u.astype(np.float64), cfg.loss, with_terms=True)
        if not finite or not np.isfinite(terms.loss):
            raise TrainingError(
                f"non-finite loss at iteration {it}",
                last_checkpoint=checkpoints[-1] if checkpoints else None,
            )
        grads = backward(params, cache, grad_u.astype(dtype))
        new_arrays, state = adam_step(params.arrays(), grads, state, cfg.learning_rate)
        params = params.with_arrays(new_arrays)
        history.append(
            {
                "iter": it,
                "loss": terms.loss,
                "cc_term": terms.cc,
                "smooth_term": terms.smooth,
                "wall_ms": 1e3 * (time.perf_counter() - t0),
            }
        )
        if cfg.checkpoint_interval and it % cfg.checkpoint_interval == 0:
            checkpoint(it)
        elif it == cfg.iterations:
            checkpoint(it)
        if it % 100 == 0:
            recent = np.mean([h["loss"] for h in history[-100:]])
            log.info("iter %d  mean loss (last 100) %.4f", it, recent)
    if out_dir:
        write_log_csv(history, out_dir / "train_log.csv")
    return TrainResult(params, history, checkpoints)


def write_log_csv(history: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "loss", "cc_term", "smooth_term", "wall_ms"])
        for h in history:
            w.writerow([h["iter"], repr(h["loss"]), repr(h["cc_term"]), repr(h["smooth_term"]), f"{h['wall_ms']:.3f}"])


def select_model(checkpoints: Sequence, val_pairs: Sequence[Pair], tie_tol: float = 1e-12):
    """Return ``(best, scores)``: the checkpoint with the highest mean validation Dice.

    ``checkpoints`` may mix paths and :class:`NetworkParams`. Scores within
    ``tie_tol`` of the best count as ties, resolved in favour of the later
    checkpoint.
    """
    checkpoints = list(checkpoints)
    if not checkpoints:
        raise ValueError("no checkpoints to select from")
    val_pairs = list(val_pairs)
    if any(p.seg_fixed is None or p.seg_moving is None for p in val_pairs):
        raise ValueError("validation pairs need segmentations")
    scores = []
    best, best_score = None, -np.inf
    for ck in checkpoints:
        params = load_params(ck) if not isinstance(ck, NetworkParams) else ck
        score = evaluate_registration(network_field_source(params), val_pairs).mean
        scores.append(score)
        if score >= best_score - tie_tol:
            best, best_score = ck, max(score, best_score)
    return best, scores


def sweep_lambda(
    base: TrainConfig,
    lambdas: Sequence[float],
    train_pairs: Sequence[Pair],
    eval_pairs: Sequence[Pair],
):
    """Train one network per lambda (same seed) and score it.

    Returns ``(rows, params)`` where each row is ``(lambda, mean_dice,
    mean_smooth_energy)`` on ``eval_pairs`` and ``params`` maps lambda to
    the trained network. Duplicate lambdas are dropped with a warning.
    """
    if not len(lambdas):
        raise ValueError("lambda grid is empty")
    unique = list(dict.fromkeys(float(l) for l in lambdas))
    if len(unique) != len(lambdas):
        warnings.warn("duplicate lambda values removed from sweep grid", stacklevel=2)
    rows, trained = [], {}
    for lam in unique:
        cfg = dataclasses.replace(base, loss=dataclasses.replace(base.loss, lam=lam))
        if base.out_dir:
            cfg.out_dir = str(Path(base.out_dir) / f"lambda_{lam:g}")
        result = train(cfg, train_pairs)
        report = evaluate_registration(network_field_source(result.params), eval_pairs)
        rows.append((lam, report.mean, report.mean_smoothness))
        trained[lam] = result.params
        log.info("lambda %g: dice %.4f smooth %.3f", lam, report.mean, report.mean_smoothness)
    return rows, trained


def write_sweep_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lambda", "mean_dice", "mean_smooth_energy"])
        for lam, d, s in rows:
            w.writerow([repr(lam), repr(d), repr(s)])


def save_config(cfg: TrainConfig, path) -> None:
    with open(path, "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=1)


def load_config(path) -> TrainConfig:
    with open(path) as fh:
        return TrainConfig.from_dict(json.load(fh))
