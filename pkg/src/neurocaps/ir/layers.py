"""Layer specifications.

Each spec knows its output shape, its parameter shapes and initialisers, and
how to apply itself to a batched tensor.  Shapes exclude the batch axis.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import ClassVar

import numpy as np

from .. import capsnet
from ..errors import ContractError, DimensionError, VersionError
from ..tensor import Tensor, add, conv2d, dense, mul, pad2d, pool2d, relu, reshape, sigmoid, softmax, sub


class ApplyContext:
    """Per-forward state shared by layers: mode, RNG, earlier outputs."""

    def __init__(self, training: bool, rng: np.random.Generator | None, outputs: list):
        self.training = training
        self.rng = rng
        self.outputs = outputs


def _he_uniform(rng, shape, fan_in):
    limit = math.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)


def _conv_size(size, k, stride, padding=0):
    out = (size + 2 * padding - k) // stride + 1
    if out < 1:
        raise DimensionError(f"kernel {k} does not fit spatial size {size} (padding {padding})")
    return out


class LayerSpec:
    kind: ClassVar[str] = ""
    linear: ClassVar[bool] = False

    def out_shape(self, in_shape: tuple) -> tuple:
        return tuple(in_shape)

    def param_shapes(self, in_shape: tuple) -> dict:
        return {}

    def init_params(self, in_shape: tuple, rng: np.random.Generator) -> dict:
        return {}

    def trainable(self, name: str) -> bool:
        return True

    def apply(self, x: Tensor, p: dict, ctx: ApplyContext) -> Tensor:
        return x

    def to_dict(self) -> dict:
        return {"kind": self.kind, **asdict(self)}


def _image(in_shape, who):
    if len(in_shape) != 3:
        raise DimensionError(f"{who} expects a [C,H,W] input, got {in_shape}")
    return in_shape


@dataclass(frozen=True)
class Conv2D(LayerSpec):
    filters: int
    kernel: int
    stride: int = 1
    padding: int = 0
    kind: ClassVar[str] = "conv2d"
    linear: ClassVar[bool] = True

    def out_shape(self, in_shape):
        c, h, w = _image(in_shape, "Conv2D")
        return (self.filters, _conv_size(h, self.kernel, self.stride, self.padding),
                _conv_size(w, self.kernel, self.stride, self.padding))

    def param_shapes(self, in_shape):
        c = _image(in_shape, "Conv2D")[0]
        return {"kernel": (self.filters, c, self.kernel, self.kernel), "bias": (self.filters,)}

    def init_params(self, in_shape, rng):
        shapes = self.param_shapes(in_shape)
        fan_in = int(np.prod(shapes["kernel"][1:]))
        return {"kernel": _he_uniform(rng, shapes["kernel"], fan_in),
                "bias": np.zeros(shapes["bias"], np.float32)}

    def apply(self, x, p, ctx):
        return conv2d(x, p["kernel"], self.stride, self.padding, bias=p["bias"])


@dataclass(frozen=True)
class Dense(LayerSpec):
    units: int
    kind: ClassVar[str] = "dense"
    linear: ClassVar[bool] = True

    def out_shape(self, in_shape):
        if len(in_shape) != 1:
            raise DimensionError(f"Dense expects a flat input, got {in_shape} (add Flatten)")
        return (self.units,)

    def param_shapes(self, in_shape):
        self.out_shape(in_shape)
        return {"weight": (self.units, in_shape[0]), "bias": (self.units,)}

    def init_params(self, in_shape, rng):
        shapes = self.param_shapes(in_shape)
        return {"weight": _he_uniform(rng, shapes["weight"], in_shape[0]),
                "bias": np.zeros(shapes["bias"], np.float32)}

    def apply(self, x, p, ctx):
        return dense(x, p["weight"], p["bias"])


@dataclass(frozen=True)
class AvgPool(LayerSpec):
    window: int
    stride: int
    kind: ClassVar[str] = "avgpool"
    linear: ClassVar[bool] = True

    def out_shape(self, in_shape):
        c, h, w = _image(in_shape, "AvgPool")
        if self.window > h or self.window > w:
            raise DimensionError(f"pool window {self.window} larger than {h}x{w}")
        return (c, _conv_size(h, self.window, self.stride), _conv_size(w, self.window, self.stride))

    def apply(self, x, p, ctx):
        return pool2d(x, self.window, self.stride, "avg")


@dataclass(frozen=True)
class MaxPool(AvgPool):
    kind: ClassVar[str] = "maxpool"
    linear: ClassVar[bool] = False

    def apply(self, x, p, ctx):
        return pool2d(x, self.window, self.stride, "max")


@dataclass(frozen=True)
class Flatten(LayerSpec):
    kind: ClassVar[str] = "flatten"
    linear: ClassVar[bool] = True

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def apply(self, x, p, ctx):
        return reshape(x, (x.shape[0], -1))


@dataclass(frozen=True)
class ZeroPad(LayerSpec):
    amount: int
    kind: ClassVar[str] = "zeropad"
    linear: ClassVar[bool] = True

    def out_shape(self, in_shape):
        c, h, w = _image(in_shape, "ZeroPad")
        return (c, h + 2 * self.amount, w + 2 * self.amount)

    def apply(self, x, p, ctx):
        return pad2d(x, self.amount)


@dataclass(frozen=True)
class ReLU(LayerSpec):
    kind: ClassVar[str] = "relu"

    def apply(self, x, p, ctx):
        return relu(x)


@dataclass(frozen=True)
class Softmax(LayerSpec):
    kind: ClassVar[str] = "softmax"

    def apply(self, x, p, ctx):
        return softmax(x, axis=-1)


@dataclass(frozen=True)
class Dropout(LayerSpec):
    rate: float = 0.25
    kind: ClassVar[str] = "dropout"

    def __post_init__(self):
        if not 0 <= self.rate < 1:
            raise ContractError(f"dropout rate must be in [0,1), got {self.rate}")

    def apply(self, x, p, ctx):
        if not ctx.training or self.rate == 0:
            return x
        rng = ctx.rng if ctx.rng is not None else np.random.default_rng(0)
        keep = (rng.random(x.shape) >= self.rate).astype(x.dtype)
        return mul(x, keep * x.dtype.type(1.0 / (1.0 - self.rate)))


@dataclass(frozen=True)
class BatchNorm(LayerSpec):
    """Per-channel affine normalisation with stored statistics.

    ``mean``/``var`` are fixed buffers; only ``gamma``/``beta`` train.
    """

    eps: float = 1e-5
    kind: ClassVar[str] = "batchnorm"

    def param_shapes(self, in_shape):
        return {k: (in_shape[0],) for k in ("gamma", "beta", "mean", "var")}

    def init_params(self, in_shape, rng):
        n = in_shape[0]
        return {"gamma": np.ones(n, np.float32), "beta": np.zeros(n, np.float32),
                "mean": np.zeros(n, np.float32), "var": np.ones(n, np.float32)}

    def trainable(self, name):
        return name in ("gamma", "beta")

    def apply(self, x, p, ctx):
        shape = (-1,) + (1,) * (x.ndim - 2)
        inv_std = 1.0 / np.sqrt(p["var"].data.astype(np.float64) + self.eps)
        inv_std = Tensor._wrap(inv_std.astype(x.dtype).reshape(shape))
        centered = sub(x, Tensor._wrap(p["mean"].data.reshape(shape)))
        return add(mul(mul(centered, inv_std), reshape(p["gamma"], shape)),
                   reshape(p["beta"], shape))


@dataclass(frozen=True)
class Add(LayerSpec):
    source_layer_index: int
    kind: ClassVar[str] = "add"

    def apply(self, x, p, ctx):
        return add(x, ctx.outputs[self.source_layer_index])


@dataclass(frozen=True)
class PrimaryCaps(LayerSpec):
    channels: int = 32
    caps_dim: int = 8
    kernel: int = 9
    stride: int = 2
    kind: ClassVar[str] = "primarycaps"

    def out_shape(self, in_shape):
        _, h, w = _image(in_shape, "PrimaryCaps")
        ho, wo = _conv_size(h, self.kernel, self.stride), _conv_size(w, self.kernel, self.stride)
        return (self.channels * ho * wo, self.caps_dim)

    def param_shapes(self, in_shape):
        c = _image(in_shape, "PrimaryCaps")[0]
        n = self.channels * self.caps_dim
        return {"kernel": (n, c, self.kernel, self.kernel), "bias": (n,)}

    def init_params(self, in_shape, rng):
        shapes = self.param_shapes(in_shape)
        fan_in = int(np.prod(shapes["kernel"][1:]))
        return {"kernel": _he_uniform(rng, shapes["kernel"], fan_in),
                "bias": np.zeros(shapes["bias"], np.float32)}

    def apply(self, x, p, ctx):
        return capsnet.primary_caps(x, p["kernel"], p["bias"], self.channels,
                                    self.caps_dim, self.stride)


@dataclass(frozen=True)
class ClassCaps(LayerSpec):
    num_caps: int = 3
    caps_dim: int = 16
    routing_iters: int = 3
    kind: ClassVar[str] = "classcaps"

    def out_shape(self, in_shape):
        if len(in_shape) != 2:
            raise DimensionError(f"ClassCaps expects [N_caps, dim] input, got {in_shape}")
        return (self.num_caps, self.caps_dim)

    def param_shapes(self, in_shape):
        self.out_shape(in_shape)
        return {"transform": (in_shape[0], self.num_caps, self.caps_dim, in_shape[1])}

    def init_params(self, in_shape, rng):
        shape = self.param_shapes(in_shape)["transform"]
        return {"transform": (rng.standard_normal(shape) * 0.01).astype(np.float32)}

    def apply(self, x, p, ctx):
        u_hat = capsnet.predict_capsules(x, p["transform"])
        v, _ = capsnet.dynamic_routing(u_hat, self.routing_iters)
        return v


@dataclass(frozen=True)
class DecoderDense(LayerSpec):
    units: int
    activation: str = "relu"
    kind: ClassVar[str] = "decoderdense"

    def out_shape(self, in_shape):
        return (self.units,)

    def param_shapes(self, in_shape):
        n = int(np.prod(in_shape))
        return {"weight": (self.units, n), "bias": (self.units,)}

    def init_params(self, in_shape, rng):
        shapes = self.param_shapes(in_shape)
        return {"weight": _he_uniform(rng, shapes["weight"], shapes["weight"][1]),
                "bias": np.zeros(shapes["bias"], np.float32)}

    def apply(self, x, p, ctx):
        if x.ndim > 2:
            x = reshape(x, (x.shape[0], -1))
        y = dense(x, p["weight"], p["bias"])
        if self.activation == "relu":
            return relu(y)
        if self.activation == "sigmoid":
            return sigmoid(y)
        return y


LAYER_KINDS = {cls.kind: cls for cls in (
    Conv2D, Dense, AvgPool, MaxPool, Flatten, ZeroPad, ReLU, Softmax, Dropout,
    BatchNorm, Add, PrimaryCaps, ClassCaps, DecoderDense)}


def layer_from_dict(d: dict) -> LayerSpec:
    d = dict(d)
    kind = d.pop("kind", None)
    cls = LAYER_KINDS.get(kind)
    if cls is None:
        raise VersionError(f"unknown layer kind tag {kind!r}")
    names = {f.name for f in fields(cls)}
    if set(d) - names:
        raise VersionError(f"unexpected fields for {kind}: {sorted(set(d) - names)}")
    return cls(**d)
