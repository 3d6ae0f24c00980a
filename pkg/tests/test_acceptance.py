"""End-to-end acceptance checks, one test per numbered criterion.

Each test prints a ``criterion N: PASS|FAIL`` line; the same lines are
repeated in the terminal summary.  The heavy fixtures (full synthetic
benchmark, trained capsule network and CNN, timestep sweep) are shared at
module scope so each model is trained once.
"""

import hashlib
import struct
import time
import warnings
from pathlib import Path

import numpy as np
import pytest

from neurocaps import capsnet
from neurocaps.cli import main as cli_main
from neurocaps.data.dataset import LabeledImageSet
from neurocaps.data.io import dumps_dataset, loads_dataset
from neurocaps.data.splits import kfold_by_patient, split_stratified_by_patient
from neurocaps.data.synthetic import DEFAULT_PRIORS, gen_synthetic
from neurocaps.energy import EnergyModel, joules_per_inference, loihi_energy_bounds
from neurocaps.errors import BadMagicError, ChecksumError, VersionError
from neurocaps.ir import zoo
from neurocaps.ir.graph import ModelGraph, accuracy
from neurocaps.ir.layers import AvgPool, BatchNorm, Conv2D, Dense, Dropout, Flatten, ReLU, ZeroPad
from neurocaps.ir.serialize import dumps_model, loads_model
from neurocaps.ir.train import LRSchedule, TrainConfig, train
from neurocaps.metrics import mcc, per_class_prf
from neurocaps.snn.compile import normalize_and_convert, validate_convertible
from neurocaps.snn.sim import NeuronPopulation, poisson_encode, step, timestep_sweep
from neurocaps.tensor import Tensor, conv2d, dense, grad_check, square, tsum

SEED = 7
SWEEP_T = [16, 32, 64, 128, 256, 512]


@pytest.fixture(scope="module")
def benchmark_split():
    ds = gen_synthetic(3064, DEFAULT_PRIORS, patients=233, seed=SEED)
    return split_stratified_by_patient(ds, 0.3, seed=SEED)


@pytest.fixture(scope="module")
def trained_capsnet(benchmark_split):
    train_set, test_set = benchmark_split
    cfg = TrainConfig(loss="capsule_margin", epochs=2, batch_size=32,
                      schedule=LRSchedule.exponential(1e-3, 0.95), seed=SEED)
    t0 = time.process_time()
    model, _ = train(zoo.capsnet(seed=SEED), train_set, cfg)
    acc = accuracy(model, test_set.images, test_set.labels)
    return acc, time.process_time() - t0


@pytest.fixture(scope="module")
def trained_cnn(benchmark_split):
    train_set, _ = benchmark_split
    cfg = TrainConfig(epochs=8, batch_size=32, schedule=LRSchedule.exponential(2e-3, 0.9), seed=SEED)
    model, _ = train(zoo.toy_cnn(seed=SEED), train_set, cfg)
    return model


@pytest.fixture(scope="module")
def sweep(trained_cnn, benchmark_split):
    """Conversion plus one constant-current run to T=512, read at every checkpoint."""
    train_set, test_set = benchmark_split
    t0 = time.perf_counter()
    net, _ = normalize_and_convert(trained_cnn, train_set, evaluate=False)
    rows = timestep_sweep(net, test_set, SWEEP_T, "constant_current", seed=SEED)
    return rows, time.perf_counter() - t0


def test_criterion_01_energy_arithmetic(criterion):
    t0 = time.perf_counter()
    resnet = joules_per_inference(38.556, 324)
    caps = joules_per_inference(24.9535, 143)
    lo, hi = loihi_energy_bounds(EnergyModel(caps, 109, 0.01002, 55, 106))
    wall = time.perf_counter() - t0
    got = (resnet, caps, lo, hi)
    ok = all(abs(g - e) <= 1e-4 for g, e in zip(got, (0.1190, 0.1745, 0.0016, 0.0052))) and wall < 1
    criterion(1, ok, "J/inference " + " ".join(f"{g:.4f}" for g in got) + f" in {wall * 1e3:.1f} ms")


def test_criterion_02_accuracy(criterion, trained_capsnet, trained_cnn, benchmark_split):
    caps_acc, caps_cpu = trained_capsnet
    _, test_set = benchmark_split
    cnn_acc = accuracy(trained_cnn, test_set.images, test_set.labels)
    ok = caps_acc >= 0.90 and caps_cpu < 15 * 60 and cnn_acc >= 0.85
    criterion(2, ok, f"capsnet {caps_acc:.4f} ({caps_cpu / 60:.1f} CPU-min), toy CNN {cnn_acc:.4f}")


def test_criterion_03_conversion_gap(criterion, trained_cnn, benchmark_split, sweep):
    _, test_set = benchmark_split
    rows, wall = sweep
    ann = accuracy(trained_cnn, test_set.images, test_set.labels)
    snn = next(r.accuracy for r in rows if r.T == 256)
    gap = 100 * abs(ann - snn)
    ok = gap <= 2.0 and wall < 600
    criterion(3, ok, f"ANN {ann:.4f} SNN(T=256) {snn:.4f} gap {gap:.2f} points, {wall:.0f} s")


def test_criterion_04_routing(criterion):
    rng = np.random.default_rng(SEED)
    worst = 0.0
    for _ in range(100):
        n_in, n_out, dim = rng.integers(1, 12), rng.integers(1, 6), rng.integers(1, 9)
        u = Tensor(rng.standard_normal((n_in, n_out, dim)), np.float64)
        _, _, history = capsnet.dynamic_routing(u, 3, return_history=True)
        worst = max(worst, max(np.abs(c.sum(axis=-1) - 1).max() for c in history))
    a, d = np.array([0.6, 0.8]), np.array([0.9, -0.3])
    # both inputs agree on output 1 and contradict each other on output 0
    u = Tensor(np.stack([np.stack([d, a]), np.stack([-d, a])]), np.float64)
    _, _, history = capsnet.dynamic_routing(u, 3, return_history=True)
    rising = all(np.all(history[k + 1][:, 1] > history[k][:, 1]) for k in range(2))
    ok = worst <= 1e-6 and rising
    criterion(4, ok, f"max |row sum - 1| {worst:.1e}; c[:,1] per iteration "
              + " ".join(f"{h[0, 1]:.3f}" for h in history))


def test_criterion_05_gradients(criterion):
    worst = {}
    for seed in range(10):
        rng = np.random.default_rng(seed)
        w = Tensor(rng.standard_normal((3, 4)), np.float64)
        k = Tensor(rng.standard_normal((2, 2, 3, 3)), np.float64)
        b = Tensor(rng.standard_normal(3), np.float64)
        x_margin = rng.uniform(0.15, 0.85, (2, 3))
        checks = {
            "squash": (lambda t: tsum(capsnet.squash(t) * w), rng.standard_normal((3, 4))),
            "margin": (lambda t: capsnet.margin_loss(t, [0, 2]), x_margin),
            "routing": (lambda t: tsum(capsnet.dynamic_routing(t, 3)[0] * Tensor(w.data[:, :2], np.float64)),
                        rng.standard_normal((4, 3, 2))),
            "conv2d": (lambda t: tsum(square(conv2d(t, k, 1, 1))), rng.standard_normal((2, 5, 5))),
            "dense": (lambda t: tsum(square(dense(t, w, b))), rng.standard_normal((2, 4))),
        }
        for name, (fn, x) in checks.items():
            worst[name] = max(worst.get(name, 0.0), grad_check(fn, Tensor(x)))
    ok = all(v <= 1e-3 for v in worst.values())
    criterion(5, ok, "max rel. error " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))


def test_criterion_06_if_dynamics(criterion):
    pop = NeuronPopulation(1)
    spikes = sum(int(step(pop, [0.4])[0]) for _ in range(10))
    v_final = float(pop.v[0])
    worst = 0.0
    for a in np.round(np.arange(1, 10) * 0.1, 1):
        pop = NeuronPopulation(1)
        count = sum(int(step(pop, [a])[0]) for _ in range(1000))
        worst = max(worst, abs(count / 1000 - a))
    # 1e-12 absorbs the float error of 0.4 * 10 not summing to exactly 4
    ok = spikes == 4 and abs(v_final) <= 1e-12 and worst <= 1 / 1000 + 1e-12
    criterion(6, ok, f"{spikes} spikes, v={v_final:.1e}; max |count/T - a| {worst:.4f} (bound 0.001)")


def test_criterion_07_poisson(criterion):
    counts = np.array([poisson_encode([0.5], 1000, seed=SEED, sample_index=i).sum() for i in range(1000)])
    inside = float(np.mean((counts >= 453) & (counts <= 547)))
    criterion(7, inside >= 0.99, f"{inside:.1%} of pixels in [453, 547]; mean count {counts.mean():.1f}")


def test_criterion_08_metrics(criterion):
    m = mcc(np.array([[2, 1], [1, 2]]))
    perfect = np.diag([4, 6, 5])
    prf = per_class_prf(perfect)
    single = mcc(np.array([[5, 0, 0], [3, 0, 0], [4, 0, 0]]))
    ok = abs(m - 1 / 3) <= 1e-6 and mcc(perfect) == 1.0 and all(r == (1.0, 1.0, 1.0) for r in prf) and single == 0
    criterion(8, ok, f"MCC {m:.6f}; perfect MCC {mcc(perfect):.1f}; single-class MCC {single:.1f}")


def test_criterion_09_splits(criterion):
    ds = gen_synthetic(3064, DEFAULT_PRIORS, patients=233, seed=SEED, size=4)
    largest = np.bincount(ds.patient_ids).max()
    overlaps = bound_misses = partition_misses = 0
    for seed in range(200):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            train_set, test_set = split_stratified_by_patient(ds, 0.3, seed=seed)
        overlaps += bool(set(train_set.patient_ids.tolist()) & set(test_set.patient_ids.tolist()))
        bound_misses += abs(len(test_set) / len(ds) - 0.3) > largest / len(ds)
    for seed in range(200):
        folds = kfold_by_patient(ds, 5, seed=seed)
        val_ids = [set(v.patient_ids.tolist()) for _, v in folds]
        overlaps += sum(bool(set(t.patient_ids.tolist()) & set(v.patient_ids.tolist())) for t, v in folds)
        covered = sorted(np.concatenate([v.patient_ids for _, v in folds]).tolist())
        partition_misses += (covered != sorted(ds.patient_ids.tolist())
                             or sum(map(len, val_ids)) != len(set().union(*val_ids)))
    ok = overlaps == 0 and bound_misses == 0 and partition_misses == 0
    criterion(9, ok, f"200 splits + 200 5-fold runs: {overlaps} overlaps, {bound_misses} bound misses, "
              f"{partition_misses} partition misses")


def test_criterion_10_rejection(criterion):
    resnet = validate_convertible(zoo.toy_resnet())
    caps = validate_convertible(zoo.capsnet())
    ok = (any("residual skip-connection unsupported" in v for v in resnet)
          and any("capsule layer unsupported" in v for v in caps)
          and validate_convertible(zoo.toy_cnn()) == [])
    criterion(10, ok, f"resnet: {resnet[0]}; capsnet: {caps[0]}")


def _random_model(rng, seed):
    c = int(rng.integers(1, 3))
    layers = [ZeroPad(int(rng.integers(0, 2))), Conv2D(int(rng.integers(1, 4)), 3), BatchNorm(), ReLU(),
              AvgPool(2, 2), Flatten(), Dropout(0.2), Dense(int(rng.integers(2, 9))), ReLU(), Dense(3)]
    return ModelGraph.build(layers, (c, 8, 8), 3, seed)


def test_criterion_11_serialization(criterion):
    rng = np.random.default_rng(SEED)
    mismatches = 0
    for seed in range(100):
        blob = dumps_model(_random_model(rng, seed))
        mismatches += dumps_model(loads_model(blob)) != blob
        n = int(rng.integers(1, 20))
        ds = LabeledImageSet(rng.random((n, 1, 6, 6)), rng.integers(0, 3, n), rng.integers(0, 50, n))
        data = dumps_dataset(ds)
        mismatches += dumps_dataset(loads_dataset(data)) != data
    blob = dumps_model(_random_model(rng, 0))
    versioned = bytearray(blob)
    versioned[4:6] = struct.pack("<H", 9)
    flipped = bytearray(blob)
    flipped[len(blob) // 3] ^= 0x40
    cases = [(b"ABCD" + blob[4:], BadMagicError), (blob[:-7], ChecksumError),
             (bytes(flipped), ChecksumError), (bytes(versioned), VersionError)]
    wrong = 0
    for payload, expected in cases:
        try:
            loads_model(payload)
            wrong += 1
        except expected:
            pass
    ok = mismatches == 0 and wrong == 0
    criterion(11, ok, f"200 round trips, {mismatches} mismatches; {len(cases) - wrong}/{len(cases)} "
              "corruptions raised the designated error")


def test_criterion_12_sweep(criterion, sweep):
    rows, _ = sweep
    acc = {r.T: r.accuracy for r in rows}
    deltas = [r for r in rows if r.delta_vs_half is not None]
    ok = len(deltas) == 5 and acc[512] >= acc[16] - 0.01
    criterion(12, ok, " ".join(f"T={r.T}:{r.accuracy:.3f}" for r in rows)
              + f"; halving 512->256 costs {100 * deltas[-1].delta_vs_half:.2f} points")


def _sha_tree(root: Path) -> dict:
    return {p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.iterdir()) if not p.name.endswith(".manifest.json")}


def _pipeline(root: Path, threads: int) -> None:
    root.mkdir()
    common = ["--seed", "3", "--threads", str(threads)]

    def run(*argv):
        code = cli_main([str(a) for a in argv] + common)
        assert code == 0, f"{argv[0]} exited {code}"

    caps = root / "caps.nnir"
    Path(caps).write_bytes(dumps_model(zoo.capsnet((1, 16, 16), 3, seed=1, conv_filters=4, primary_channels=2,
                                                   primary_dim=4, class_dim=6, decoder=(16,), kernel=5)))
    run("gen-data", "--n", 150, "--patients", 15, "--size", 16, "--out", root / "ds.ngds")
    run("split", "--data", root / "ds.ngds", "--out", root / "split",
        "--train-out", root / "tr.ngds", "--test-out", root / "te.ngds")
    run("train", "--arch", "cnn", "--data", root / "tr.ngds", "--val", root / "te.ngds", "--epochs", 1,
        "--out", root / "cnn.nnir")
    run("convert", "--model", root / "cnn.nnir", "--calib", root / "tr.ngds", "--T", 32, "--out", root / "cnn.snnc")
    run("simulate", "--snn", root / "cnn.snnc", "--data", root / "te.ngds", "--T", 48, "--encoder", "poisson",
        "--trace", root / "trace.csv", "--out", root / "sim.csv")
    run("simulate", "--snn", root / "cnn.snnc", "--data", root / "te.ngds", "--sweep-T", "8,16,32",
        "--out", root / "sweep.csv")
    run("benchmark", "--models", f"cnn={root / 'cnn.nnir'}", f"snn={root / 'cnn.snnc'}", "--data", root / "te.ngds",
        "--train-data", root / "tr.ngds", "--fraction", 0.5, "--epochs", 1, "--T", 32, "--no-throughput",
        "--out", root / "t1.csv")
    run("crossval", "--arch", "dense", "--hidden", 8, "--data", root / "ds.ngds", "--folds", 3, "--epochs", 1,
        "--out", root / "t3.csv")
    run("explain", "--model", caps, "--data", root / "te.ngds", "--dims", "0,1", "--deltas=-0.2,0,0.2",
        "--out", root / "grid.pgm")


def test_criterion_13_cli_determinism(criterion, tmp_path):
    trees = {}
    for label, threads in (("a", 1), ("b", 4), ("c", 1)):
        _pipeline(tmp_path / label, threads)
        trees[label] = _sha_tree(tmp_path / label)
    diff = sorted(k for k in trees["a"] if not trees["a"][k] == trees["b"].get(k) == trees["c"].get(k))
    ok = not diff and len(trees["a"]) >= 20
    criterion(13, ok, f"8 commands, {len(trees['a'])} output files identical across reruns at threads 1/4/1"
              if ok else f"differing outputs: {diff}")
