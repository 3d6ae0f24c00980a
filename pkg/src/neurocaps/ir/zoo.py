"""Reference architectures used by the experiments."""

from __future__ import annotations

import numpy as np

from .graph import ModelGraph
from .layers import (
    Add,
    AvgPool,
    ClassCaps,
    Conv2D,
    DecoderDense,
    Dense,
    Dropout,
    Flatten,
    PrimaryCaps,
    ReLU,
    Softmax,
)


def capsnet(input_shape=(1, 28, 28), classes: int = 3, seed: int = 0, conv_filters: int = 256,
            primary_channels: int = 32, primary_dim: int = 8, class_dim: int = 16,
            routing_iters: int = 3, dropout: float = 0.25, decoder=(512, 1024),
            kernel: int = 9) -> ModelGraph:
    """Conv(256, 9) -> dropout -> PrimaryCaps(32x8, k9 s2) -> dropout -> ClassCaps(3x16, 3 iters) + decoder."""
    pixels = int(np.prod(input_shape))
    layers = [
        Conv2D(conv_filters, kernel),
        ReLU(),
        Dropout(dropout),
        PrimaryCaps(primary_channels, primary_dim, kernel, 2),
        Dropout(dropout),
        ClassCaps(classes, class_dim, routing_iters),
    ]
    layers += [DecoderDense(u, "relu") for u in decoder]
    layers.append(DecoderDense(pixels, "sigmoid"))
    return ModelGraph.build(layers, input_shape, classes, seed, metadata={"arch": "capsnet"})


def toy_cnn(input_shape=(1, 28, 28), classes: int = 3, seed: int = 0, filters=(8, 16),
            hidden: int = 32) -> ModelGraph:
    """Small conv/avg-pool/dense network built only from conversion-friendly layers."""
    layers = [
        Conv2D(filters[0], 5), ReLU(), AvgPool(2, 2),
        Conv2D(filters[1], 5), ReLU(), AvgPool(2, 2),
        Flatten(), Dense(hidden), ReLU(), Dense(classes), Softmax(),
    ]
    return ModelGraph.build(layers, input_shape, classes, seed, metadata={"arch": "cnn"})


def dense_mlp(input_shape=(1, 28, 28), classes: int = 3, seed: int = 0, hidden: int = 64) -> ModelGraph:
    layers = [Flatten(), Dense(hidden), ReLU(), Dense(classes)]
    if len(input_shape) == 1:
        layers = layers[1:]
    return ModelGraph.build(layers, input_shape, classes, seed, metadata={"arch": "dense"})


def toy_resnet(input_shape=(1, 28, 28), classes: int = 3, seed: int = 0, width: int = 8,
               blocks: int = 2) -> ModelGraph:
    """Stem conv plus ``blocks`` two-conv residual blocks (at most 10)."""
    if not 1 <= blocks <= 10:
        raise ValueError("toy residual net supports 1..10 blocks")
    layers = [Conv2D(width, 3, 1, 1), ReLU()]
    for _ in range(blocks):
        skip = len(layers) - 1
        layers += [Conv2D(width, 3, 1, 1), ReLU(), Conv2D(width, 3, 1, 1), Add(skip), ReLU()]
    layers += [AvgPool(4, 4), Flatten(), Dense(classes)]
    return ModelGraph.build(layers, input_shape, classes, seed, metadata={"arch": "resnet"})


ARCHITECTURES = {
    "capsnet": capsnet,
    "cnn": toy_cnn,
    "dense": dense_mlp,
    "resnet": toy_resnet,
}
