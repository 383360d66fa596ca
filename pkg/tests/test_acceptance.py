"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The lines are echoed to stderr as they are produced and repeated in the
pytest terminal summary under "acceptance criteria". Run on its own with

    pytest tests/test_acceptance.py -v

The registration criteria train real networks and take roughly 20 minutes on
one CPU core.
"""
import time

import numpy as np
import pytest
from scipy.stats import spearmanr

from _report import record
from test_warp import random_offsets
from morphflow import cli
from morphflow.baseline import VarOptConfig, optimize_pair
from morphflow.diffops import (
    ConvKernel,
    concat_channels,
    concat_channels_backward,
    conv_backward,
    conv_forward,
    finite_diff_check,
    leaky_relu_backward,
    leaky_relu_forward,
    upsample_nearest,
    upsample_nearest_backward,
)
from morphflow.evaluation import (
    benchmark_runtime,
    dice,
    evaluate_registration,
    filter_structures,
    identity_field_source,
    network_field_source,
)
from morphflow.loss import LossConfig, diffusion_reg, diffusion_reg_vjp, local_cc, local_cc_vjp, total_loss
from morphflow.network import ArchConfig, backward, build_network, forward, load_params, model1
from morphflow.synth import PhantomSpec, load_manifest, write_dataset
from morphflow.trainer import TrainConfig, select_model, sweep_lambda, train
from morphflow.warp import identity_field, sample_linear, sample_linear_vjp, sample_nearest

SEEDS = range(20)
# desk-scale training schedule; see the README for how it was chosen
LEARNING_RATE = 1e-3
ITERS_2D = 3000
ITERS_3D = 2000


# ------------------------------------------------------------ shared runs


def _registration_run(tmp_path_factory, name, shape, n_structures, iterations):
    root = tmp_path_factory.mktemp(name)
    spec = PhantomSpec(shape=shape, n_structures=n_structures, deform_amplitude=5.0, deform_smoothness=4.0, seed=0)
    write_dataset(root / "data", spec, 60, {"train": 40, "val": 10, "test": 10})
    train_pairs = load_manifest(root / "data" / "train.json", dtype=np.float32)
    val = load_manifest(root / "data" / "val.json")
    test = load_manifest(root / "data" / "test.json")
    t0 = time.perf_counter()
    cfg = TrainConfig(
        learning_rate=LEARNING_RATE,
        iterations=iterations,
        seed=0,
        loss=LossConfig(lam=1.0),
        arch=model1(len(shape)),
        checkpoint_interval=500,
        out_dir=str(root / "run"),
    )
    result = train(cfg, train_pairs)
    best, _ = select_model(result.checkpoints, val)
    params = load_params(best)
    minutes = (time.perf_counter() - t0) / 60
    identity = evaluate_registration(identity_field_source, test).mean
    net = evaluate_registration(network_field_source(params), test).mean
    return {
        "params": params,
        "train": train_pairs,
        "test": test,
        "identity": identity,
        "network": net,
        "minutes": minutes,
        "best": best,
    }


@pytest.fixture(scope="module")
def run2d(tmp_path_factory):
    return _registration_run(tmp_path_factory, "reg2d", (64, 64), 5, ITERS_2D)


@pytest.fixture(scope="module")
def run3d(tmp_path_factory):
    return _registration_run(tmp_path_factory, "reg3d", (32, 32, 32), 4, ITERS_3D)


# ------------------------------------------------------------ criterion 1


def _primitive_errors(seed):
    errs = []
    for shape in [(16,), (8, 8), (4, 4, 4)]:
        for channels in (1, 2, 4):
            r = np.random.default_rng([seed, channels, len(shape)])
            x = r.standard_normal((channels,) + shape)
            kw = dict(step=1e-5, tolerance=1e-4, seed=seed)
            for stride in (1, 2):
                k = ConvKernel(r.standard_normal((2, channels) + (3,) * len(shape)), r.standard_normal(2))
                errs.append(finite_diff_check(
                    lambda x, w, b: conv_forward(x, ConvKernel(w, b), stride),
                    lambda x, w, b, g: conv_backward(x, ConvKernel(w, b), stride, g),
                    [x, k.weight, k.bias], **kw).max_error)
            xr = np.where(np.abs(x) < 1e-3, 0.5, x)
            errs.append(finite_diff_check(
                lambda a: leaky_relu_forward(a, 0.2), lambda a, g: [leaky_relu_backward(a, 0.2, g)], [xr], **kw
            ).max_error)
            errs.append(finite_diff_check(
                upsample_nearest, lambda a, g: [upsample_nearest_backward(g)], [x], **kw).max_error)
            other = r.standard_normal((1,) + shape)
            errs.append(finite_diff_check(
                concat_channels, lambda a, b, g: concat_channels_backward(g, channels), [x, other], **kw
            ).max_error)
    return max(errs)


def _warp_error(seed):
    r = np.random.default_rng(seed)
    m = r.standard_normal((8, 8, 8))
    u = random_offsets(r, (8, 8, 8), 1.5)
    return finite_diff_check(
        lambda uu: sample_linear(m, uu), lambda uu, g: [sample_linear_vjp(m, uu, g)], [u], step=1e-5, seed=seed
    ).max_error


def _cc_error(seed):
    r = np.random.default_rng(seed)
    f = r.random((12, 12))
    w = 0.5 * f + r.random((12, 12))
    cfg = LossConfig(cc_window=5)
    return finite_diff_check(
        lambda x: np.array(local_cc(f, x, cfg)[0]),
        lambda x, g: [local_cc_vjp(f, x, cfg, float(g))],
        [w], step=1e-5, seed=seed,
    ).max_error


def _reg_error(seed):
    u = np.random.default_rng(seed).standard_normal((3, 6, 6, 6))
    return finite_diff_check(
        lambda x: np.array(diffusion_reg(x)), lambda x, g: [float(g) * diffusion_reg_vjp(x)], [u], step=1e-5, seed=seed
    ).max_error


TINY = ArchConfig(spatial_rank=2, encoder_channels=(4, 6), decoder_channels=(6, 4, 4))


def _end_to_end_error(seed):
    r = np.random.default_rng(seed)
    p = build_network(TINY, seed=seed, dtype=np.float64)
    arrays = p.arrays()
    arrays[-2] = arrays[-2] * 300  # offsets of a few tenths of a voxel
    p = p.with_arrays(arrays)
    f, m = r.random((2, 16, 16))
    cfg = LossConfig(lam=0.5, cc_window=5)

    def loss_of(*arrays):
        u, _ = forward(p.with_arrays(arrays), f, m)
        return np.array(total_loss(f, m, u, cfg)[0])

    def vjp(*args):
        *arrays, g = args
        q = p.with_arrays(arrays)
        u, cache = forward(q, f, m)
        _, grad_u = total_loss(f, m, u, cfg)
        return [float(g) * x for x in backward(q, cache, grad_u)]

    # the composite is piecewise smooth (interpolation cells, rectifier);
    # 1e-6 keeps the probe inside one piece for every seed
    return finite_diff_check(loss_of, vjp, p.arrays(), step=1e-6, tolerance=1e-4, n_directions=2, seed=seed).max_error


def test_c1_gradient_correctness():
    t0 = time.perf_counter()
    groups = {
        "diffops": _primitive_errors,
        "sample_linear_vjp": _warp_error,
        "local_cc_vjp": _cc_error,
        "diffusion_reg_vjp": _reg_error,
        "loss->params (2-level 2D 16^2)": _end_to_end_error,
    }
    worst = {name: max(fn(s) for s in SEEDS) for name, fn in groups.items()}
    elapsed = time.perf_counter() - t0
    ok = all(e < 1e-4 for e in worst.values()) and elapsed < 300
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    record("C1 gradient correctness", ok, f"max rel error over {len(SEEDS)} seeds: {detail}; {elapsed:.0f} s")
    assert ok


# ------------------------------------------------------------ criterion 2


def test_c2_warp_identities():
    ulps, pou, lin = 0.0, 0.0, 0.0
    for seed in SEEDS:
        r = np.random.default_rng(seed)
        for shape in [(9, 7), (5, 6, 7)]:
            m = r.standard_normal(shape)
            out = sample_linear(m, identity_field(shape))
            ulps = max(ulps, float(np.max(np.abs(out - m) / np.spacing(np.abs(m)))))
            u = r.uniform(-3, 3, (len(shape),) + shape)
            pou = max(pou, float(np.max(np.abs(sample_linear(np.ones(shape), u) - 1.0))))
            m2 = r.standard_normal(shape)
            a, b = r.uniform(-3, 3, 2)
            lin = max(lin, float(np.max(np.abs(
                sample_linear(a * m + b * m2, u) - (a * sample_linear(m, u) + b * sample_linear(m2, u))))))
    ok = ulps <= 1 and pou == 0.0 and lin < 1e-6
    record("C2 warp identities", ok, f"identity {ulps:.0f} ulp, partition of unity max dev {pou:.1e}, linearity {lin:.1e}")
    assert ok


# ------------------------------------------------------------ criterion 3


def _brute_cc(f, w, p, width, eps):
    half = width // 2
    sl = tuple(slice(max(0, c - half), c + half + 1) for c in p)
    fv, wv = f[sl].ravel(), w[sl].ravel()
    fc, wc = fv - fv.mean(), wv - wv.mean()
    return np.sum(fc * wc) ** 2 / (np.sum(fc * fc) * np.sum(wc * wc) + eps)


def test_c3_cc_properties():
    cfg = LossConfig()
    lo, hi, inv, oracle = np.inf, -np.inf, 0.0, 0.0
    for seed in SEEDS:
        r = np.random.default_rng(seed)
        f = r.standard_normal((16, 16, 16))
        w = 0.4 * f + r.standard_normal((16, 16, 16))
        _, v = local_cc(f, w, cfg)
        lo, hi = min(lo, v.min()), max(hi, v.max())
        for a in (-2.0, 0.5, 3.0):
            _, va = local_cc(f, a * w + 0.7, cfg)
            inv = max(inv, float(np.abs(va - v).max()))
        p = tuple(r.integers(0, 16, 3))
        oracle = max(oracle, abs(v[p] - _brute_cc(f, w, p, cfg.cc_window, cfg.epsilon)))
    ok = lo >= 0 and hi <= 1 + 1e-4 and inv < 1e-6 and oracle < 1e-12
    record("C3 CC properties", ok,
           f"per-voxel range [{lo:.3g}, {hi:.6g}], max invariance dev {inv:.1e}, window oracle dev {oracle:.1e}")
    assert ok


# ------------------------------------------------------------ criterion 4


def test_c4_registration_2d(run2d):
    gain = run2d["network"] - run2d["identity"]
    ok = run2d["identity"] <= 0.80 and gain >= 0.15 and run2d["minutes"] <= 30
    record("C4 registration 2D 64^2", ok,
           f"identity Dice {run2d['identity']:.3f}, network {run2d['network']:.3f} (gain {gain:+.3f}), "
           f"{ITERS_2D} iterations, {run2d['minutes']:.1f} min, selected {run2d['best'].name}")
    assert ok


def test_c4_registration_3d(run3d):
    gain = run3d["network"] - run3d["identity"]
    ok = gain >= 0.10 and run3d["minutes"] <= 60
    record("C4 registration 3D 32^3", ok,
           f"identity Dice {run3d['identity']:.3f}, network {run3d['network']:.3f} (gain {gain:+.3f}), "
           f"{ITERS_3D} iterations, {run3d['minutes']:.1f} min, selected {run3d['best'].name}")
    assert ok


# ------------------------------------------------------------ criterion 5


def _speedup(run, n_pairs=3):
    params = run["params"]
    pairs = run["test"][:n_pairs]
    loss = LossConfig(lam=1.0)
    targets = []
    for p in pairs:
        u, _ = forward(params, p.fixed, p.moving)
        e, _ = total_loss(p.fixed, p.moving, u.astype(np.float64), loss)
        targets.append(e + 0.05 * abs(e))
    cfgs = {id(p): VarOptConfig(iterations=2000, levels=3, loss=loss, target_energy=t) for p, t in zip(pairs, targets)}
    reached = 0
    for p, t in zip(pairs, targets):
        u, _ = optimize_pair(p.fixed, p.moving, cfgs[id(p)])
        reached += total_loss(p.fixed, p.moving, u, loss)[0] <= t
    stats = benchmark_runtime(
        {
            "network": lambda p: forward(params, p.fixed, p.moving),
            "baseline": lambda p: optimize_pair(p.fixed, p.moving, cfgs[id(p)]),
        },
        pairs,
        repetitions=3,
    )
    return stats[0].median_ms, stats[1].median_ms, reached, len(pairs)


@pytest.mark.parametrize("dim", ["2d", "3d"])
def test_c5_amortization_speedup(dim, request):
    run = request.getfixturevalue(f"run{dim}")
    net_ms, base_ms, reached, n = _speedup(run)
    ratio = base_ms / net_ms
    ok = ratio >= 10 and reached == n
    record(f"C5 speedup {dim}", ok,
           f"network median {net_ms:.1f} ms, baseline {base_ms:.1f} ms ({ratio:.1f}x); "
           f"baseline reached 5% energy target on {reached}/{n} pairs")
    assert ok


# ------------------------------------------------------------ criterion 6


def test_c6_regularization_sweep(run2d):
    lambdas = [0.0, 0.5, 1.0, 2.0, 4.0]
    base = TrainConfig(learning_rate=LEARNING_RATE, iterations=1500, seed=0, arch=model1(2))
    rows, _ = sweep_lambda(base, lambdas, run2d["train"], run2d["test"])
    dice0 = rows[0][1]
    rho = spearmanr([r[0] for r in rows], [r[2] for r in rows]).statistic
    ok = dice0 > run2d["identity"] and rho <= 0
    table = "; ".join(f"lambda {lam:g}: Dice {d:.3f} smooth {s:.1f}" for lam, d, s in rows)
    record("C6 regularization sweep", ok,
           f"lambda=0 Dice {dice0:.3f} vs identity {run2d['identity']:.3f}, Spearman(lambda, smoothness) {rho:.2f} | {table}")
    assert ok


# ------------------------------------------------------------ criterion 7


def test_c7_baseline_sanity(run2d):
    monotone = True
    before, after = [], []
    for p in run2d["test"][:5]:
        u, log = optimize_pair(p.fixed, p.moving, VarOptConfig(iterations=100, levels=3))
        for level in {s.level for s in log}:
            e = [s.energy for s in log if s.level == level]
            monotone &= all(b <= a for a, b in zip(e, e[1:]))
        labels = filter_structures([p.seg_fixed, p.seg_moving])
        warped = sample_nearest(p.seg_moving, u)
        before.append(np.mean([dice(p.seg_moving, p.seg_fixed, k) for k in labels]))
        after.append(np.mean([dice(warped, p.seg_fixed, k) for k in labels]))
    ok = monotone and np.mean(after) > np.mean(before)
    record("C7 baseline sanity", ok,
           f"energy non-increasing within every level: {monotone}; Dice {np.mean(before):.3f} -> {np.mean(after):.3f}")
    assert ok


# ------------------------------------------------------------ criterion 8


def test_c8_reproducibility(tmp_path):
    same = {}
    for name, shape, structures in [("2d", "64,64", "5"), ("3d", "32,32,32", "4")]:
        data = []
        for rep in "ab":
            out = tmp_path / f"synth_{name}_{rep}"
            assert cli.run(["synth", "--shape", shape, "--structures", structures, "--pairs", "3",
                            "--seed", "7", "--threads", "1", "--out", str(out)]) == 0
            data.append({p.name: p.read_bytes() for p in out.iterdir()})
        same[f"synth {name}"] = data[0] == data[1]
        ckpts = []
        for rep in "ab":
            out = tmp_path / f"train_{name}_{rep}"
            assert cli.run(["train", "--train-manifest", str(tmp_path / f"synth_{name}_a" / "manifest.json"),
                            "--iterations", "5", "--learning-rate", "1e-3", "--seed", "3", "--threads", "1",
                            "--out", str(out)]) == 0
            ckpts.append((out / "ckpt_000005.ckpt").read_bytes())
        same[f"train {name}"] = ckpts[0] == ckpts[1]
    ok = all(same.values())
    record("C8 reproducibility", ok, ", ".join(f"{k} bit-identical: {v}" for k, v in same.items()))
    assert ok
