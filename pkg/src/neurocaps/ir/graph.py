"""Layer-graph model representation and forward execution."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..errors import ContractError, DimensionError
from ..tensor import Tensor, mul, reshape
from .. import capsnet
from .layers import (
    Add,
    ApplyContext,
    ClassCaps,
    DecoderDense,
    LayerSpec,
    Softmax,
)


def param_name(index: int, layer: LayerSpec, name: str) -> str:
    return f"{index}.{layer.kind}.{name}"


@dataclass
class ModelGraph:
    """Ordered layers + named parameters.

    Layers after a :class:`ClassCaps` layer that are :class:`DecoderDense` form
    the reconstruction branch; the classification output of a capsule model is
    the vector of output-capsule lengths.
    """

    layers: list
    input_shape: tuple
    class_count: int
    params: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.layers = list(self.layers)
        self.input_shape = tuple(int(d) for d in self.input_shape)
        self.shapes = self._check_shapes()
        expected = self.param_shapes()
        if not self.params:
            return
        if set(self.params) != set(expected):
            missing, extra = set(expected) - set(self.params), set(self.params) - set(expected)
            raise DimensionError(f"parameter set mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
        for name, shape in expected.items():
            t = self.params[name]
            if not isinstance(t, Tensor):
                t = self.params[name] = Tensor(t)
            if t.shape != tuple(shape):
                raise DimensionError(f"{name}: shape {t.shape} != {shape}")

    @classmethod
    def build(cls, layers: Sequence[LayerSpec], input_shape, class_count: int,
              seed: int = 0, metadata: dict | None = None) -> "ModelGraph":
        model = cls(list(layers), tuple(input_shape), class_count, metadata=dict(metadata or {}))
        model.params = model.init_params(seed)
        return model

    def init_params(self, seed: int) -> dict:
        rng = np.random.default_rng(seed)
        params = {}
        for i, layer in enumerate(self.layers):
            for name, arr in layer.init_params(self.in_shape(i), rng).items():
                params[param_name(i, layer, name)] = Tensor(arr)
        return params

    def _check_shapes(self) -> list:
        shapes = []
        shape = self.input_shape
        caps_index = None
        for i, layer in enumerate(self.layers):
            if isinstance(layer, DecoderDense):
                if caps_index is None:
                    raise DimensionError(f"layer {i}: decoder layers must follow a ClassCaps layer")
            elif caps_index is not None:
                raise DimensionError(f"layer {i}: only decoder layers may follow ClassCaps")
            if isinstance(layer, Add):
                src = layer.source_layer_index
                if not 0 <= src < i:
                    raise DimensionError(f"layer {i}: Add source {src} is not an earlier layer")
                if shapes[src] != shape:
                    raise DimensionError(
                        f"layer {i}: Add source shape {shapes[src]} != main path {shape}")
            if isinstance(layer, DecoderDense) and shapes and isinstance(self.layers[i - 1], ClassCaps):
                shape = (int(np.prod(shape)),)
            shape = tuple(layer.out_shape(shape))
            shapes.append(shape)
            if isinstance(layer, ClassCaps):
                caps_index = i
        if caps_index is not None:
            out = (self.layers[caps_index].num_caps,)
            decoder = self.decoder_layers()
            if decoder and shapes[-1] != (int(np.prod(self.input_shape)),):
                raise DimensionError(
                    f"decoder output {shapes[-1]} does not match input size {np.prod(self.input_shape)}")
        else:
            out = shapes[-1] if shapes else self.input_shape
        if out != (self.class_count,):
            raise DimensionError(f"model output shape {out} != ({self.class_count},)")
        return shapes

    def in_shape(self, index: int) -> tuple:
        if index == 0:
            return self.input_shape
        prev = self.shapes[index - 1]
        if isinstance(self.layers[index], DecoderDense) and isinstance(self.layers[index - 1], ClassCaps):
            return (int(np.prod(prev)),)
        return prev

    def param_shapes(self) -> dict:
        out = {}
        for i, layer in enumerate(self.layers):
            for name, shape in layer.param_shapes(self.in_shape(i)).items():
                out[param_name(i, layer, name)] = tuple(shape)
        return out

    def layer_params(self, index: int) -> dict:
        layer = self.layers[index]
        prefix = f"{index}.{layer.kind}."
        return {k[len(prefix):]: v for k, v in self.params.items() if k.startswith(prefix)}

    def param_names(self, index: int) -> list:
        layer = self.layers[index]
        return [param_name(index, layer, n) for n in layer.param_shapes(self.in_shape(index))]

    def trainable_names(self, frozen=()) -> list:
        names = []
        for i, layer in enumerate(self.layers):
            if i in frozen:
                continue
            for n in layer.param_shapes(self.in_shape(i)):
                if layer.trainable(n):
                    names.append(param_name(i, layer, n))
        return names

    def capsule_layer(self) -> ClassCaps | None:
        for layer in self.layers:
            if isinstance(layer, ClassCaps):
                return layer
        return None

    def capsule_index(self) -> int | None:
        for i, layer in enumerate(self.layers):
            if isinstance(layer, ClassCaps):
                return i
        return None

    def decoder_layers(self) -> list:
        return [(i, l) for i, l in enumerate(self.layers) if isinstance(l, DecoderDense)]

    def copy(self) -> "ModelGraph":
        params = {k: Tensor(v.data) for k, v in self.params.items()}
        return ModelGraph(list(self.layers), self.input_shape, self.class_count, params,
                          dict(self.metadata))

    def with_params(self, params: dict) -> "ModelGraph":
        return ModelGraph(list(self.layers), self.input_shape, self.class_count,
                          {k: Tensor(v.data if isinstance(v, Tensor) else v) for k, v in params.items()},
                          dict(self.metadata))


@dataclass
class ForwardPass:
    output: Tensor
    logits: Tensor
    capsules: Tensor | None = None
    reconstruction: Tensor | None = None
    activations: list = field(default_factory=list)


def _as_batch(model: ModelGraph, batch) -> Tensor:
    t = batch if isinstance(batch, Tensor) else Tensor._wrap(np.asarray(batch, dtype=np.float32))
    if t.shape == model.input_shape:
        return reshape(t, (1,) + t.shape)
    if t.shape[1:] != model.input_shape:
        raise DimensionError(f"batch shape {t.shape} does not match model input {model.input_shape}")
    return t


def run(model: ModelGraph, batch, training: bool = False, rng=None, labels=None,
        decode: bool = False, mask_index: int | None = None) -> ForwardPass:
    """Full forward pass returning output, logits, capsules and optional reconstruction.

    ``labels`` selects the decoded capsule during training; otherwise the
    longest capsule (or ``mask_index``) is decoded.
    """
    x = _as_batch(model, batch)
    ctx = ApplyContext(training, rng, [])
    logits = None
    capsules = None
    caps_index = model.capsule_index()
    for i, layer in enumerate(model.layers):
        if isinstance(layer, DecoderDense):
            break
        if isinstance(layer, Softmax) and i == len(model.layers) - 1:
            logits = x
        x = layer.apply(x, model.layer_params(i), ctx)
        ctx.outputs.append(x)
        if i == caps_index:
            capsules = x
            x = capsnet.capsule_lengths(x)
            break
    if logits is None:
        logits = x
    recon = None
    if decode and capsules is not None and model.decoder_layers():
        if labels is not None:
            chosen = np.asarray(labels, dtype=np.int64)
        elif mask_index is not None:
            chosen = np.full(capsules.shape[0], mask_index, dtype=np.int64)
        else:
            chosen = np.argmax(x.data, axis=-1)
        recon = decode_capsules(model, capsules, chosen, ctx)
    return ForwardPass(x, logits, capsules, recon, ctx.outputs)


def decode_capsules(model: ModelGraph, capsules: Tensor, chosen, ctx=None) -> Tensor:
    """Zero every capsule except ``chosen[n]`` and run the decoder branch."""
    caps = model.capsule_layer()
    mask = capsnet.one_hot(chosen, caps.num_caps, dtype=capsules.dtype)[..., None]
    h = reshape(mul(capsules, mask), (capsules.shape[0], -1))
    ctx = ctx or ApplyContext(False, None, [])
    for i, layer in model.decoder_layers():
        h = layer.apply(h, model.layer_params(i), ctx)
    return h


def forward(model: ModelGraph, batch, training: bool = False, rng=None) -> Tensor:
    """Class scores: logits/probabilities, or capsule lengths for capsule models."""
    return run(model, batch, training, rng).output


def predict(model: ModelGraph, images, batch_size: int = 64) -> np.ndarray:
    """Argmax class per sample (ties resolve to the lowest index)."""
    images = images.data if isinstance(images, Tensor) else np.asarray(images, dtype=np.float32)
    if images.shape == model.input_shape:
        images = images[None]
    preds = []
    for start in range(0, images.shape[0], batch_size):
        out = forward(model, images[start:start + batch_size])
        preds.append(np.argmax(out.data, axis=-1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def accuracy(model: ModelGraph, images, labels, batch_size: int = 64) -> float:
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ContractError("accuracy of an empty set is undefined")
    return float(np.mean(predict(model, images, batch_size) == labels))
