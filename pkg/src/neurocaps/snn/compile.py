"""Conversion of rate-coded ReLU networks into integrate-and-fire networks.

Every run of linear layers between two ReLUs is lowered to a single affine
map ``A x + c`` by pushing an identity basis through it; the map is then
rescaled by per-population activation percentiles so firing rates stay in
``[0, 1]`` for thresholds of 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import CompileError, ContractError, DegenerateScaleError
from ..ir.graph import ModelGraph
from ..ir.layers import (
    Add,
    ApplyContext,
    BatchNorm,
    ClassCaps,
    Conv2D,
    DecoderDense,
    Dense,
    Dropout,
    MaxPool,
    PrimaryCaps,
    ReLU,
    Softmax,
)
from ..tensor import Tensor
from .network import SpikingLayer, SpikingNetwork

DEFAULT_PERCENTILE = 99.9
_BASIS_CHUNK = 512


def fold_batchnorm(model: ModelGraph) -> ModelGraph:
    """Merge each BatchNorm into the Conv2D/Dense right before it."""
    if any(isinstance(l, Add) for l in model.layers):
        raise CompileError("cannot fold BatchNorm in a model with skip connections")
    layers, params = [], {}
    for i, layer in enumerate(model.layers):
        p = model.layer_params(i)
        if isinstance(layer, BatchNorm):
            prev = model.layers[i - 1] if i else None
            if not isinstance(prev, (Conv2D, Dense)):
                raise CompileError(f"layer {i}: BatchNorm must directly follow Conv2D or Dense")
            j = len(layers) - 1
            key = "kernel" if isinstance(prev, Conv2D) else "weight"
            w = params[f"{j}.{prev.kind}.{key}"].astype(np.float64)
            b = params[f"{j}.{prev.kind}.bias"].astype(np.float64)
            g = p["gamma"].data.astype(np.float64)
            scale = g / np.sqrt(p["var"].data.astype(np.float64) + layer.eps)
            params[f"{j}.{prev.kind}.{key}"] = w * scale.reshape((-1,) + (1,) * (w.ndim - 1))
            params[f"{j}.{prev.kind}.bias"] = (b - p["mean"].data) * scale + p["beta"].data
            continue
        j = len(layers)
        layers.append(layer)
        for name, t in p.items():
            params[f"{j}.{layer.kind}.{name}"] = t.data
    return ModelGraph(layers, model.input_shape, model.class_count,
                      {k: Tensor(v) for k, v in params.items()}, dict(model.metadata))


def validate_convertible(model: ModelGraph) -> list:
    """Named violations; an empty list means the model converts."""
    violations = []
    last = len(model.layers) - 1
    for i, layer in enumerate(model.layers):
        where = f"layer {i} ({layer.kind})"
        if isinstance(layer, Add):
            violations.append(f"{where}: residual skip-connection unsupported")
        elif isinstance(layer, (PrimaryCaps, ClassCaps, DecoderDense)):
            violations.append(f"{where}: capsule layer unsupported")
        elif isinstance(layer, MaxPool):
            violations.append(f"{where}: max pooling unsupported (use AvgPool)")
        elif isinstance(layer, Softmax) and i != last:
            violations.append(f"{where}: Softmax only supported as the final layer")
        elif isinstance(layer, BatchNorm) and not (i and isinstance(model.layers[i - 1], (Conv2D, Dense))):
            violations.append(f"{where}: BatchNorm must directly follow Conv2D or Dense")
        elif not (layer.linear or isinstance(layer, (ReLU, Softmax, Dropout, BatchNorm))):
            violations.append(f"{where}: layer type unsupported")
    return violations


@dataclass
class Segment:
    """Affine map ``x -> A x + c`` between two spiking populations."""

    matrix: np.ndarray  # [out, in] float64
    offset: np.ndarray  # [out]
    relu: bool
    name: str

    def apply(self, x: np.ndarray) -> np.ndarray:
        y = x @ self.matrix.T + self.offset
        return np.maximum(y, 0.0) if self.relu else y


def _lower(model: ModelGraph, indices: list, in_shape: tuple) -> tuple:
    """Push the zero vector and an identity basis through a run of linear layers."""
    n_in = int(np.prod(in_shape))
    ctx = ApplyContext(False, None, [])

    def push(batch):
        x = Tensor._wrap(batch.reshape((batch.shape[0],) + in_shape))
        for i in indices:
            x = model.layers[i].apply(x, model.layer_params(i), ctx)
        return x.data.reshape(batch.shape[0], -1).astype(np.float64)

    offset = push(np.zeros((1, n_in), np.float32))[0]
    cols = []
    for start in range(0, n_in, _BASIS_CHUNK):
        stop = min(start + _BASIS_CHUNK, n_in)
        basis = np.zeros((stop - start, n_in), np.float32)
        basis[np.arange(stop - start), np.arange(start, stop)] = 1.0
        cols.append(push(basis) - offset)
    return np.concatenate(cols, axis=0).T, offset


def lower_segments(model: ModelGraph) -> list:
    """Split a convertible model into affine segments ending at each ReLU."""
    violations = validate_convertible(model)
    if violations:
        raise CompileError("; ".join(violations))
    if any(isinstance(l, BatchNorm) for l in model.layers):
        model = fold_batchnorm(model)
    segments, run, run_in = [], [], model.input_shape
    for i, layer in enumerate(model.layers):
        if isinstance(layer, (Dropout, Softmax)):
            continue
        if isinstance(layer, ReLU):
            if run:
                a, c = _lower(model, run, run_in)
                segments.append(Segment(a, c, True, _segment_name(model, run)))
            elif segments:
                segments[-1].relu = True
            run, run_in = [], model.shapes[i]
            continue
        if not run:
            run_in = model.in_shape(i)
        run.append(i)
    if run:
        a, c = _lower(model, run, run_in)
        segments.append(Segment(a, c, False, _segment_name(model, run)))
    if not segments:
        raise CompileError("model has no linear layers to convert")
    return segments


def _segment_name(model, run) -> str:
    return "+".join(f"{i}.{model.layers[i].kind}" for i in run)


def segment_activations(segments: list, images: np.ndarray, batch_size: int = 256) -> list:
    """Per-population ANN activations (ReLU'd except a linear output)."""
    x = np.asarray(images, dtype=np.float64).reshape(len(images), -1)
    outs = [[] for _ in segments]
    for start in range(0, len(x), batch_size):
        h = x[start:start + batch_size]
        for k, seg in enumerate(segments):
            h = seg.apply(h)
            outs[k].append(h)
    return [np.concatenate(o, axis=0) for o in outs]


def _scale(acts: np.ndarray, percentile: float, name: str) -> float:
    pos = np.maximum(acts, 0.0).reshape(-1)
    if not np.any(pos > 0):
        raise DegenerateScaleError(name, f"population {name!r} never activates on the calibration set")
    lam = float(np.percentile(pos, percentile))
    if lam <= 0:
        # Mostly-silent population: take the percentile over active units only.
        lam = float(np.percentile(pos[pos > 0], percentile))
    return lam


@dataclass
class ConversionReport:
    scales: list
    percentile: float
    layer_names: list
    violations: list = field(default_factory=list)
    ann_accuracy: float | None = None
    snn_accuracy: float | None = None
    timesteps: int | None = None

    @property
    def conversion_gap(self) -> float | None:
        if self.ann_accuracy is None or self.snn_accuracy is None:
            return None
        return self.ann_accuracy - self.snn_accuracy

    def rows(self) -> list:
        """``(field, value)`` rows for CSV output."""
        rows = [("percentile", self.percentile)]
        rows += [(f"lambda[{i}] {n}", s) for i, (n, s) in enumerate(zip(self.layer_names, self.scales))]
        rows += [("ann_accuracy", self.ann_accuracy), ("snn_accuracy", self.snn_accuracy),
                 ("conversion_gap", self.conversion_gap), ("timesteps", self.timesteps)]
        rows += [("violation", v) for v in self.violations]
        return rows


def normalize_and_convert(model: ModelGraph, calibration, percentile: float = DEFAULT_PERCENTILE,
                          evaluate: bool = True, timesteps: int = 256):
    """Compile ``model`` into a :class:`SpikingNetwork` with thresholds of 1.

    ``calibration`` is a :class:`LabeledImageSet`. With ``evaluate`` the ANN
    and the constant-current SNN (``timesteps`` steps) are scored on it.
    """
    if not 0 < percentile <= 100:
        raise ContractError(f"percentile must be in (0, 100], got {percentile}")
    if len(calibration) == 0:
        raise ContractError("calibration set is empty")
    segments = lower_segments(model)
    images = calibration.images
    if images.min() < 0 or images.max() > 1:
        raise ContractError("calibration images must lie in [0, 1]")
    acts = segment_activations(segments, images)
    scales = [_scale(a, percentile, s.name) for a, s in zip(acts, segments)]
    layers, prev = [], 1.0
    for seg, lam in zip(segments, scales):
        w = seg.matrix * (prev / lam)
        b = seg.offset / lam
        layers.append(SpikingLayer(w.astype(np.float32), b.astype(np.float32), 1.0, seg.name))
        prev = lam
    net = SpikingNetwork(layers, model.input_shape, model.class_count, "constant_current")
    report = ConversionReport(scales, float(percentile), [s.name for s in segments])
    if evaluate:
        from .sim import SimConfig, run_batch

        ann_pred = np.argmax(acts[-1], axis=1)
        report.ann_accuracy = float(np.mean(ann_pred == calibration.labels))
        trace = run_batch(net, images, SimConfig(timesteps, "constant_current"))
        report.snn_accuracy = float(np.mean(trace.predictions == calibration.labels))
        report.timesteps = timesteps
    return net, report


def check_convertible(model: ModelGraph) -> None:
    violations = validate_convertible(model)
    if violations:
        raise CompileError("; ".join(violations))
