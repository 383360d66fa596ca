"""Command-line entry point: ``morphflow <subcommand> [flags]``.

Every subcommand accepts ``--config FILE``. Values are resolved as built-in
defaults, then the config file, then flags given explicitly on the command
line. The resolved settings and seed are logged before any work starts.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .baseline import VarOptConfig, optimize_pair
from .evaluation import (
    benchmark_runtime,
    evaluate_registration,
    export_field_rgb,
    gt_field_source,
    identity_field_source,
    network_field_source,
    write_benchmark_csv,
)
from .loss import LossConfig, total_loss
from .network import ArchConfig, forward, load_params, model1, model2
from .synth import PhantomSpec, load_manifest, write_dataset
from .trainer import TrainConfig, load_config, save_config, select_model, sweep_lambda, train, write_sweep_csv
from .volume_io import load_volume, save_field, save_volume
from .warp import sample_linear

log = logging.getLogger("morphflow")

PRESETS = {"model1": model1, "model2": model2}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _shape(text: str) -> tuple[int, ...]:
    try:
        dims = tuple(int(t) for t in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid shape {text!r}; expected e.g. 32,32,32")
    if not dims or any(d < 1 for d in dims):
        raise argparse.ArgumentTypeError(f"invalid shape {text!r}")
    return dims


def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid number list {text!r}")


def _splits(text: str) -> dict[str, int]:
    out = {}
    for item in text.split(","):
        name, _, count = item.partition("=")
        if not name or not count.isdigit():
            raise argparse.ArgumentTypeError(f"invalid split {item!r}; expected name=count")
        out[name] = int(count)
    return out


def _default_threads():
    env = os.environ.get("MORPHFLOW_THREADS")
    return int(env) if env else None


# ---------------------------------------------------------------- parser


def _common(p):
    p.add_argument("--config", help="JSON file of settings; explicit flags take precedence")
    p.add_argument(
        "--threads",
        type=int,
        default=_default_threads(),
        help="cap on BLAS/OpenMP threads (default: $MORPHFLOW_THREADS, else unlimited); 1 is bit-deterministic",
    )
    p.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])


def _train_flags(p):
    p.add_argument("--train-manifest", help="training manifest (JSON from synth)")
    p.add_argument("--iterations", type=int, help="optimizer steps (default 1000)")
    p.add_argument("--learning-rate", type=float, help="Adam step size (default 1e-4)")
    p.add_argument("--lambda", dest="lam", type=float, help="smoothness weight (default 1.0)")
    p.add_argument("--cc-window", type=int, help="local CC window width (default 9)")
    p.add_argument("--seed", type=int, help="initialisation and sampling seed (default 0)")
    p.add_argument("--preset", choices=sorted(PRESETS), help="architecture preset (default model1)")
    p.add_argument("--checkpoint-interval", type=int, help="iterations between checkpoints; 0 keeps only the last")
    p.add_argument("--dtype", choices=["float32", "float64"], help="parameter precision (default float32)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="morphflow", description="Learned deformable image registration.")
    parser.add_argument("--version", action="version", version=f"morphflow {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("synth", help="write a synthetic atlas dataset")
    _common(p)
    p.add_argument("--shape", type=_shape, default=(32, 32, 32), help="comma-separated dims (default 32,32,32)")
    p.add_argument("--pairs", type=int, default=20, help="number of warped copies of the atlas (default 20)")
    p.add_argument("--seed", type=int, default=0, help="dataset seed (default 0)")
    p.add_argument("--structures", type=int, default=4, help="labelled structures (default 4)")
    p.add_argument("--amplitude", type=float, default=5.0, help="max displacement in voxels (default 5)")
    p.add_argument("--smoothness", type=float, default=4.0, help="field blur radius in voxels (default 4)")
    p.add_argument("--min-voxels", type=int, default=100, help="minimum structure size (default 100)")
    p.add_argument("--splits", type=_splits, default=None, help="e.g. train=40,val=10,test=10")
    p.add_argument("--out", required=False, help="output directory")

    p = sub.add_parser("train", help="train a registration network")
    _common(p)
    _train_flags(p)
    p.add_argument("--val-manifest", help="validation manifest; enables checkpoint selection")
    p.add_argument("--out", dest="out_dir", help="output directory for checkpoints and logs")

    p = sub.add_parser("register", help="apply a trained network to one pair")
    _common(p)
    p.add_argument("--checkpoint", help="trained checkpoint")
    p.add_argument("--fixed", help="fixed volume")
    p.add_argument("--moving", help="moving volume")
    p.add_argument("--out-field", help="output displacement field")
    p.add_argument("--out-warped", default=None, help="output warped moving volume (optional)")
    p.add_argument("--format", default="native", choices=["native", "nifti1"], help="input volume format")

    p = sub.add_parser("optimize-pair", help="register one pair by direct optimisation")
    _common(p)
    p.add_argument("--fixed", help="fixed volume")
    p.add_argument("--moving", help="moving volume")
    p.add_argument("--out-field", help="output displacement field")
    p.add_argument("--out-warped", default=None, help="output warped moving volume (optional)")
    p.add_argument("--energy-csv", default=None, help="per-iteration energy log (optional)")
    p.add_argument("--iterations", type=int, default=100, help="iterations per pyramid level (default 100)")
    p.add_argument("--levels", type=int, default=3, help="pyramid levels (default 3)")
    p.add_argument("--step-size", type=float, default=0.05, help="initial gradient step (default 0.05)")
    p.add_argument("--lambda", dest="lam", type=float, default=1.0, help="smoothness weight (default 1.0)")
    p.add_argument("--cc-window", type=int, default=9, help="local CC window width (default 9)")
    p.add_argument("--target-energy", type=float, default=None, help="stop once the energy reaches this")
    p.add_argument("--format", default="native", choices=["native", "nifti1"], help="input volume format")

    p = sub.add_parser("evaluate", help="Dice evaluation on a manifest")
    _common(p)
    p.add_argument("--manifest", help="manifest with segmentations")
    p.add_argument("--checkpoint", default=None, help="network checkpoint (needed for --method network)")
    p.add_argument("--method", default="network", choices=["network", "identity", "oracle"])
    p.add_argument("--min-voxels", type=int, default=100, help="structure size filter (default 100)")
    p.add_argument("--out", default=None, help="per-structure CSV subject,label,dice")
    p.add_argument("--summary", default=None, help="summary CSV metric,mean,sd")
    p.add_argument("--rgb", default=None, help="PNG of the first pair's field (middle slice)")

    p = sub.add_parser("sweep", help="train one network per lambda and score each")
    _common(p)
    _train_flags(p)
    p.add_argument("--lambdas", type=_floats, default=[0.0, 0.5, 1.0, 2.0, 4.0], help="comma-separated grid")
    p.add_argument("--eval-manifest", help="manifest used to score each network")
    p.add_argument("--out", dest="out_dir", help="output directory")

    p = sub.add_parser("bench", help="runtime of the network against direct optimisation")
    _common(p)
    p.add_argument("--checkpoint", help="trained checkpoint")
    p.add_argument("--manifest", help="pairs to time")
    p.add_argument("--max-pairs", type=int, default=3, help="pairs to time (default 3)")
    p.add_argument("--repetitions", type=int, default=3, help="timed runs per pair after one warmup (default 3)")
    p.add_argument("--energy-tolerance", type=float, default=0.05, help="baseline stops within this fraction of the network energy")
    p.add_argument("--iterations", type=int, default=500, help="baseline iteration cap per level (default 500)")
    p.add_argument("--levels", type=int, default=3, help="baseline pyramid levels (default 3)")
    p.add_argument("--step-size", type=float, default=0.05, help="baseline initial step (default 0.05)")
    p.add_argument("--lambda", dest="lam", type=float, default=1.0, help="smoothness weight (default 1.0)")
    p.add_argument("--out", default=None, help="benchmark CSV method,median_ms,sd_ms")
    return parser


# ---------------------------------------------------------------- resolution

_COMMON = {"config", "threads", "log_level", "command"}


def _resolve(parser, argv):
    """Namespace with defaults < config file < explicit flags."""
    args = parser.parse_args(argv)
    sub = parser._subparsers._group_actions[0].choices[args.command]
    explicit = _explicit_dests(sub, argv[argv.index(args.command) + 1 :])
    if args.config and args.command not in ("train", "sweep"):
        cfg = _read_json(args.config)
        known = {a.dest for a in sub._actions}
        for key, value in cfg.items():
            dest = key.replace("-", "_")
            dest = "lam" if dest == "lambda" else dest
            if dest not in known or dest in _COMMON:
                raise UsageError(f"unknown key {key!r} in {args.config}")
            if dest not in explicit:
                setattr(args, dest, _coerce(sub, dest, value))
    return args, explicit


def _explicit_dests(sub, argv) -> set[str]:
    probe = _Parser(add_help=False)
    for action in sub._actions:
        if action.option_strings and action.dest != "help":
            kwargs = {"dest": action.dest, "default": argparse.SUPPRESS}
            if action.nargs == 0:
                kwargs["action"] = "store_true"
            probe.add_argument(*action.option_strings, **kwargs)
    ns, _ = probe.parse_known_args(argv)
    return set(vars(ns))


def _coerce(sub, dest, value):
    for action in sub._actions:
        if action.dest == dest and action.type is not None and isinstance(value, str):
            return action.type(value)
    if dest == "shape":
        return tuple(value)
    return value


def _read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON: {exc}")


def _require(args, *names):
    missing = [n for n in names if getattr(args, n, None) is None]
    if missing:
        flags = ", ".join("--" + n.replace("_", "-") for n in missing)
        raise UsageError(f"{args.command}: missing required setting(s): {flags}")


def _log_resolved(args, extra=None):
    shown = {k: v for k, v in vars(args).items() if k not in ("log_level",)}
    if extra:
        shown.update(extra)
    log.info("resolved config: %s", json.dumps(shown, default=_jsonable, sort_keys=True))
    if "seed" in shown:
        log.info("seed: %s", shown["seed"])


def _jsonable(x):
    if dataclasses.is_dataclass(x):
        return dataclasses.asdict(x)
    if isinstance(x, (tuple, set)):
        return list(x)
    if isinstance(x, np.generic):
        return x.item()
    return str(x)


# ---------------------------------------------------------------- commands


def cmd_synth(args, explicit):
    _require(args, "out")
    spec = PhantomSpec(
        shape=args.shape,
        n_structures=args.structures,
        deform_amplitude=args.amplitude,
        deform_smoothness=args.smoothness,
        seed=args.seed,
        min_voxels=args.min_voxels,
    )
    _log_resolved(args)
    manifest = write_dataset(args.out, spec, args.pairs, args.splits)
    print(f"wrote {args.pairs} pairs; manifest {manifest}")


def _train_config(args, explicit) -> TrainConfig:
    cfg = load_config(args.config) if args.config else TrainConfig()
    simple = {
        "iterations": "iterations",
        "learning_rate": "learning_rate",
        "seed": "seed",
        "checkpoint_interval": "checkpoint_interval",
        "train_manifest": "train_manifest",
        "val_manifest": "val_manifest",
        "out_dir": "out_dir",
        "dtype": "dtype",
    }
    updates = {field: getattr(args, dest) for dest, field in simple.items() if dest in explicit}
    loss_updates = {}
    if "lam" in explicit:
        loss_updates["lam"] = args.lam
    if "cc_window" in explicit:
        loss_updates["cc_window"] = args.cc_window
    if loss_updates:
        updates["loss"] = dataclasses.replace(cfg.loss, **loss_updates)
    if "preset" in explicit:
        updates["arch"] = PRESETS[args.preset](cfg.arch.spatial_rank)
    return dataclasses.replace(cfg, **updates)


def _match_rank(cfg: TrainConfig, pairs) -> TrainConfig:
    rank = pairs[0].fixed.ndim
    if cfg.arch.spatial_rank != rank:
        log.info("data is %d-D; using a %d-D network", rank, rank)
        cfg = dataclasses.replace(cfg, arch=dataclasses.replace(cfg.arch, spatial_rank=rank))
    return cfg


def cmd_train(args, explicit):
    cfg = _train_config(args, explicit)
    if cfg.train_manifest is None:
        raise UsageError("train: missing required setting: --train-manifest")
    pairs = load_manifest(cfg.train_manifest, dtype=np.dtype(cfg.dtype))
    cfg = _match_rank(cfg, pairs)
    log.info("resolved config: %s", json.dumps(cfg.to_dict(), sort_keys=True))
    log.info("seed: %d", cfg.seed)
    if cfg.out_dir:
        Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
        save_config(cfg, Path(cfg.out_dir) / "config.json")
    result = train(cfg, pairs)
    losses = [h["loss"] for h in result.log]
    k = min(50, len(losses))
    print(f"trained {cfg.iterations} iterations; mean loss first {k}: {np.mean(losses[:k]):.4f}, last {k}: {np.mean(losses[-k:]):.4f}")
    if cfg.val_manifest and result.checkpoints:
        val = load_manifest(cfg.val_manifest)
        best, scores = select_model(result.checkpoints, val)
        out = Path(cfg.out_dir)
        with open(out / "selection.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["checkpoint", "mean_dice"])
            for ck, s in zip(result.checkpoints, scores):
                w.writerow([ck.name, repr(s)])
        (out / "best.ckpt").write_bytes(Path(best).read_bytes())
        print(f"selected {Path(best).name} (validation Dice {max(scores):.4f}) -> {out / 'best.ckpt'}")


def _load_pair(args):
    f = load_volume(args.fixed, format=args.format).data
    m = load_volume(args.moving, format=args.format).data
    if f.shape != m.shape:
        raise ValueError(f"shape mismatch: fixed {f.shape} vs moving {m.shape}")
    return f, m


def cmd_register(args, explicit):
    _require(args, "checkpoint", "fixed", "moving", "out_field")
    _log_resolved(args)
    f, m = _load_pair(args)
    params = load_params(args.checkpoint, spatial_rank=f.ndim)
    t0 = time.perf_counter()
    u, _ = forward(params, f, m)
    elapsed = time.perf_counter() - t0
    save_field(u, args.out_field)
    if args.out_warped:
        save_volume(sample_linear(m, u.astype(np.float64)), args.out_warped)
    print(f"forward pass: {1e3 * elapsed:.1f} ms")


def cmd_optimize_pair(args, explicit):
    _require(args, "fixed", "moving", "out_field")
    cfg = VarOptConfig(
        iterations=args.iterations,
        step_size=args.step_size,
        levels=args.levels,
        loss=LossConfig(lam=args.lam, cc_window=args.cc_window),
        target_energy=args.target_energy,
    )
    _log_resolved(args)
    f, m = _load_pair(args)
    t0 = time.perf_counter()
    u, energies = optimize_pair(f, m, cfg)
    elapsed = time.perf_counter() - t0
    save_field(u, args.out_field)
    if args.out_warped:
        save_volume(sample_linear(m, u), args.out_warped)
    if args.energy_csv:
        with open(args.energy_csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["level", "iteration", "energy", "step"])
            for s in energies:
                w.writerow([s.level, s.iteration, repr(s.energy), repr(s.step)])
    final = energies[-1].energy if energies else float("nan")
    print(f"optimised in {elapsed:.2f} s; final energy {final:.4f}")


def _field_source(args):
    if args.method == "identity":
        return identity_field_source
    if args.method == "oracle":
        return gt_field_source
    _require(args, "checkpoint")
    return network_field_source(load_params(args.checkpoint))


def cmd_evaluate(args, explicit):
    _require(args, "manifest")
    _log_resolved(args)
    pairs = load_manifest(args.manifest)
    source = _field_source(args)
    report = evaluate_registration(source, pairs, args.min_voxels)
    if args.out:
        report.write_csv(args.out)
    if args.summary:
        report.write_summary_csv(args.summary)
    if args.rgb and pairs:
        u = source(pairs[0])
        if u.shape[0] == 3:
            export_field_rgb(u, 0, u.shape[1] // 2, args.rgb)
        else:
            export_field_rgb(u, 0, 0, args.rgb)
    print(f"mean Dice {report.mean:.4f} ({report.sd:.4f}) over {len(report.rows)} structure scores; "
          f"mean smoothness {report.mean_smoothness:.3f}")


def cmd_sweep(args, explicit):
    cfg = _train_config(args, explicit)
    if cfg.train_manifest is None:
        raise UsageError("sweep: missing required setting: --train-manifest")
    _require(args, "eval_manifest")
    train_pairs = load_manifest(cfg.train_manifest, dtype=np.dtype(cfg.dtype))
    cfg = _match_rank(cfg, train_pairs)
    eval_pairs = load_manifest(args.eval_manifest)
    log.info("resolved config: %s", json.dumps(cfg.to_dict(), sort_keys=True))
    log.info("lambdas: %s  seed: %d", args.lambdas, cfg.seed)
    rows, _ = sweep_lambda(cfg, args.lambdas, train_pairs, eval_pairs)
    if cfg.out_dir:
        Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
        write_sweep_csv(rows, Path(cfg.out_dir) / "sweep.csv")
    for lam, d, s in rows:
        print(f"lambda {lam:g}: Dice {d:.4f}  smoothness {s:.3f}")


def cmd_bench(args, explicit):
    _require(args, "checkpoint", "manifest")
    _log_resolved(args)
    params = load_params(args.checkpoint)
    pairs = load_manifest(args.manifest)[: args.max_pairs]
    loss = LossConfig(lam=args.lam)
    targets = {}
    for i, p in enumerate(pairs):
        u, _ = forward(params, p.fixed, p.moving)
        e, _ = total_loss(p.fixed, p.moving, u.astype(np.float64), loss)
        targets[id(p)] = e + args.energy_tolerance * abs(e)

    def network(p):
        return forward(params, p.fixed, p.moving)[0]

    def baseline(p):
        cfg = VarOptConfig(
            iterations=args.iterations, step_size=args.step_size, levels=args.levels,
            loss=loss, target_energy=targets[id(p)],
        )
        return optimize_pair(p.fixed, p.moving, cfg)[0]

    stats = benchmark_runtime({"network": network, "baseline": baseline}, pairs, args.repetitions)
    if args.out:
        write_benchmark_csv(stats, args.out)
    for s in stats:
        print(f"{s.method}: median {s.median_ms:.1f} ms (sd {s.sd_ms:.1f})")
    if pairs:
        print(f"speedup: {stats[1].median_ms / stats[0].median_ms:.1f}x")


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "register": cmd_register,
    "optimize-pair": cmd_optimize_pair,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "bench": cmd_bench,
}


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args, explicit = _resolve(parser, argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )
    try:
        with threadpool_limits(limits=args.threads):
            COMMANDS[args.command](args, explicit)
    except UsageError as exc:
        print(f"morphflow {args.command}: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError, ArithmeticError, RuntimeError, KeyError) as exc:
        log.error("%s failed: %s", args.command, exc)
        return 2
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
