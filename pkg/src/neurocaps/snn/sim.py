"""Timestep-driven integrate-and-fire simulation with soft reset.

Membrane potentials are float64 so that hand-computed spike sequences (for
example 0.4 per step against a threshold of 1) come out exactly.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ..errors import ContractError, DimensionError
from .network import SpikingLayer, SpikingNetwork

ENCODERS = ("constant_current", "poisson")
_POISSON_CHUNK = 64


@dataclass(frozen=True)
class SimConfig:
    T: int = 256
    encoder: str = "constant_current"
    max_rate_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if int(self.T) < 1:
            raise ContractError(f"T must be >= 1, got {self.T}")
        if self.encoder not in ENCODERS:
            raise ContractError(f"unknown encoder {self.encoder!r}; expected one of {ENCODERS}")
        if not 0 < self.max_rate_scale <= 1:
            raise ContractError("max_rate_scale must lie in (0, 1]")


class NeuronPopulation:
    """IF neurons with soft reset; potentials are floored at ``-threshold``."""

    def __init__(self, size, threshold: float = 1.0):
        if not threshold > 0:
            raise ContractError("threshold must be positive")
        self.v = np.zeros(size, dtype=np.float64)
        self.threshold = float(threshold)

    def reset(self):
        self.v[...] = 0.0


def step(pop: NeuronPopulation, input_current) -> np.ndarray:
    """Advance one timestep; returns the 0/1 spike vector."""
    current = np.asarray(input_current, dtype=np.float64)
    if not np.all(np.isfinite(current)):
        raise ContractError("input current must be finite")
    pop.v += current
    spikes = pop.v >= pop.threshold
    pop.v -= pop.threshold * spikes
    np.maximum(pop.v, -pop.threshold, out=pop.v)
    return spikes.astype(np.uint8)


def _check_intensity(x: np.ndarray):
    if x.size and (x.min() < 0 or x.max() > 1 or not np.all(np.isfinite(x))):
        raise ContractError("pixel intensities must lie in [0, 1]")


def sample_rng(seed: int, sample_index: int) -> np.random.Generator:
    """Independent stream per (seed, sample index)."""
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, int(sample_index)])


def poisson_encode(image, T: int, max_rate_scale: float = 1.0, seed: int = 0,
                   sample_index: int = 0) -> np.ndarray:
    """``[T, N_pixels]`` 0/1 trains; each pixel fires with probability ``intensity * max_rate_scale``."""
    x = np.asarray(image, dtype=np.float64).reshape(-1)
    _check_intensity(x)
    if T < 1:
        raise ContractError("T must be >= 1")
    rng = sample_rng(seed, sample_index)
    return (rng.random((T, x.size)) < x * max_rate_scale).astype(np.uint8)


@dataclass
class RunTrace:
    """Single-sample result: per-layer counts, per-step output spikes, prediction."""

    layer_counts: list
    output_spikes: np.ndarray  # [T, classes]
    prediction: int


@dataclass
class BatchTrace:
    layer_counts: list  # per layer [B, N]
    predictions: np.ndarray
    output_spikes: np.ndarray | None = None  # [T, B, classes]
    checkpoints: dict = field(default_factory=dict)  # T -> output counts [B, classes]


def readout(counts: np.ndarray) -> np.ndarray:
    """Argmax of spike counts; ties go to the lowest class index."""
    return np.argmax(np.asarray(counts), axis=-1)


def _simulate(layers: list, x: np.ndarray, cfg: SimConfig, first_index: int,
              record_output: bool, checkpoints: frozenset):
    b = x.shape[0]
    pops = [NeuronPopulation((b, layer.fan_out), layer.threshold) for layer in layers]
    counts = [np.zeros((b, layer.fan_out), dtype=np.int64) for layer in layers]
    out_steps = np.zeros((cfg.T, b, layers[-1].fan_out), np.uint8) if record_output else None
    ckpt = {}
    poisson = cfg.encoder == "poisson"
    if poisson:
        rngs = [sample_rng(cfg.seed, first_index + i) for i in range(b)]
        prob = x * cfg.max_rate_scale
    else:
        constant = layers[0].currents(x.astype(np.float32))
    block = None
    for t in range(cfg.T):
        if poisson:
            k = t % _POISSON_CHUNK
            if k == 0:
                n = min(_POISSON_CHUNK, cfg.T - t)
                block = np.stack([r.random((n, x.shape[1])) for r in rngs], axis=1) < prob
            current = layers[0].currents(block[k].astype(np.float32))
        else:
            current = constant
        for li, (layer, pop) in enumerate(zip(layers, pops)):
            spikes = step_batch(pop, current)
            counts[li] += spikes
            if li + 1 < len(layers):
                current = layers[li + 1].currents(spikes.astype(np.float32))
        if record_output:
            out_steps[t] = spikes
        if t + 1 in checkpoints:
            ckpt[t + 1] = counts[-1].copy()
    return counts, out_steps, ckpt


def step_batch(pop: NeuronPopulation, current: np.ndarray) -> np.ndarray:
    """Unchecked :func:`step` for the inner loop."""
    pop.v += current
    spikes = pop.v >= pop.threshold
    pop.v -= pop.threshold * spikes
    np.maximum(pop.v, -pop.threshold, out=pop.v)
    return spikes


def run_batch(net: SpikingNetwork, images, cfg: SimConfig, sample_offset: int = 0,
              record_output: bool = False, checkpoints=(), batch_size: int = 128,
              threads: int = 1) -> BatchTrace:
    """Simulate many samples; sample ``i`` uses the Poisson stream ``(seed, sample_offset + i)``.

    Results do not depend on ``batch_size`` or ``threads``.
    """
    x = np.asarray(images, dtype=np.float64)
    x = x.reshape(x.shape[0], -1)
    if x.shape[1] != net.input_size:
        raise DimensionError(f"input has {x.shape[1]} values, network expects {net.input_size}")
    _check_intensity(x)
    marks = frozenset(int(t) for t in checkpoints)
    starts = list(range(0, x.shape[0], batch_size))

    def job(start):
        return _simulate(net.layers, x[start:start + batch_size], cfg, sample_offset + start,
                         record_output, marks)

    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(job, starts))
    else:
        parts = [job(s) for s in starts]
    if not parts:
        raise ContractError("no samples to simulate")
    counts = [np.concatenate([p[0][li] for p in parts]) for li in range(len(net.layers))]
    out = np.concatenate([p[1] for p in parts], axis=1) if record_output else None
    ckpt = {t: np.concatenate([p[2][t] for p in parts]) for t in sorted(marks) if t <= cfg.T}
    return BatchTrace(counts, readout(counts[-1]), out, ckpt)


def run_inference(net: SpikingNetwork, image, cfg: SimConfig, sample_index: int = 0) -> RunTrace:
    x = np.asarray(image, dtype=np.float64)
    if x.size != net.input_size:
        raise DimensionError(f"image has {x.size} values, network expects {net.input_size}")
    trace = run_batch(net, x.reshape(1, -1), cfg, sample_offset=sample_index, record_output=True)
    return RunTrace([c[0] for c in trace.layer_counts], trace.output_spikes[:, 0],
                    int(trace.predictions[0]))


@dataclass(frozen=True)
class SweepRow:
    T: int
    accuracy: float
    delta_vs_half: float | None


def timestep_sweep(net: SpikingNetwork, dataset, T_list, encoder: str = "constant_current",
                   seed: int = 0, max_rate_scale: float = 1.0, threads: int = 1) -> list:
    """Accuracy at each T from one run at ``max(T_list)``.

    Simulation is causal and Poisson streams are prefix-stable, so reading
    the output counts after ``T`` steps equals an independent run of length ``T``.
    """
    ts = [int(t) for t in T_list]
    if not ts:
        raise ContractError("T_list must be nonempty")
    if any(b <= a for a, b in zip(ts, ts[1:])) or ts[0] < 1:
        raise ContractError("T_list must be strictly ascending positive integers")
    cfg = SimConfig(ts[-1], encoder, max_rate_scale, seed)
    trace = run_batch(net, dataset.images, cfg, checkpoints=ts, threads=threads)
    acc = {t: float(np.mean(readout(trace.checkpoints[t]) == dataset.labels)) for t in ts}
    rows = []
    for t in ts:
        half = t // 2 if t % 2 == 0 else None
        delta = acc[t] - acc[half] if half in acc else None
        rows.append(SweepRow(t, acc[t], delta))
    return rows


def train_single_layer_online(stream, cfg: SimConfig, eta: float, epochs: int,
                              initial_weights=None) -> SpikingNetwork:
    """Pixels-to-classes IF layer trained by a delta rule on Poisson rate traces.

    After each presentation ``dW = eta * (target - rate_out) outer rate_in`` with
    target rate 1 for the labelled class and 0 elsewhere.
    """
    if eta < 0:
        raise ContractError("eta must be nonnegative")
    if epochs < 0:
        raise ContractError("epochs must be nonnegative")
    x = np.asarray(stream.images, dtype=np.float64).reshape(len(stream), -1)
    _check_intensity(x)
    k = max(stream.num_classes, int(stream.labels.max()) + 1)
    w = (np.zeros((k, x.shape[1])) if initial_weights is None
         else np.array(initial_weights, dtype=np.float64))
    targets = np.eye(k)
    for epoch in range(epochs):
        order = np.random.default_rng([cfg.seed, 1 << 20, epoch]).permutation(len(x))
        for idx in order:
            rng = np.random.default_rng([cfg.seed, int(idx), epoch])
            spikes = (rng.random((cfg.T, x.shape[1])) < x[idx] * cfg.max_rate_scale).astype(np.float64)
            currents = spikes @ w.T
            pop = NeuronPopulation(k)
            count = np.zeros(k)
            for t in range(cfg.T):
                count += step_batch(pop, currents[t])
            pre = spikes.mean(axis=0)
            w += eta * np.outer(targets[stream.labels[idx]] - count / cfg.T, pre)
    layer = SpikingLayer(w.astype(np.float32), np.zeros(k, np.float32), 1.0, "online")
    return SpikingNetwork([layer], stream.sample_shape, k, "poisson")


def rate_correspondence(net: SpikingNetwork, source_model, scales, sample, T: int) -> list:
    """Per-layer mean ``|rate - a_l / lambda_l|`` under constant-current input.

    The output population cannot fire negatively, so its targets are clipped at 0.
    """
    from .compile import lower_segments, segment_activations

    segments = lower_segments(source_model)
    if len(segments) != len(net.layers) or len(scales) != len(net.layers):
        raise ContractError("network, source model and scale list disagree on layer count")
    for seg, layer in zip(segments, net.layers):
        if seg.matrix.shape != layer.weights.shape:
            raise ContractError(f"layer {seg.name}: {seg.matrix.shape} vs {layer.weights.shape}")
    x = np.asarray(sample, dtype=np.float64).reshape(1, -1)
    acts = segment_activations(segments, x)
    trace = run_batch(net, x, SimConfig(T, "constant_current"))
    out = []
    for a, lam, c in zip(acts, scales, trace.layer_counts):
        target = np.maximum(a[0], 0.0) / lam
        out.append(float(np.mean(np.abs(c[0] / T - target))))
    return out


def write_trace_csv(path, output_spikes: np.ndarray) -> None:
    """Dump a ``[T, neurons]`` spike matrix as ``step,neuron,spike`` rows."""
    spikes = np.asarray(output_spikes)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "neuron", "spike"])
        for t in range(spikes.shape[0]):
            for n in range(spikes.shape[1]):
                w.writerow([t, n, int(spikes[t, n])])
