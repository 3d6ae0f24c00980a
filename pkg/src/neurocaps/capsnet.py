"""Capsule computations: squash, primary capsules, routing-by-agreement, losses
and decoder-based perturbation sweeps."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import ContractError, DimensionError
from .tensor import (
    Tensor,
    add,
    conv2d,
    einsum,
    hinge,
    mul,
    norm,
    reshape,
    softmax,
    sqrt,
    square,
    sub,
    transpose,
    tsum,
)

SQUASH_EPS = 1e-8
M_PLUS, M_MINUS, DOWN_WEIGHT = 0.9, 0.1, 0.5
RECONSTRUCTION_WEIGHT = 0.0005


def squash(s: Tensor, axis: int = -1) -> Tensor:
    """Shrink each vector along ``axis`` to norm ``|s|^2 / (1 + |s|^2)``, same direction."""
    sq = tsum(square(s), axis=axis, keepdims=True)
    scale = sq / (mul(add(sq, 1.0), sqrt(add(sq, SQUASH_EPS))))
    return mul(s, scale)


def capsule_lengths(v: Tensor) -> Tensor:
    return norm(v, axis=-1, eps=SQUASH_EPS * SQUASH_EPS)


def primary_caps(features: Tensor, kernels: Tensor, bias: Tensor | None,
                 channels: int, caps_dim: int, stride: int) -> Tensor:
    """Convolve, regroup channels into ``caps_dim``-vectors and squash.

    Returns ``[N?, channels*H'*W', caps_dim]``; capsule ``(c, y, x)`` is made of
    conv channels ``c*caps_dim .. c*caps_dim + caps_dim - 1`` at ``(y, x)``.
    """
    if kernels.shape[0] != channels * caps_dim:
        raise DimensionError(
            f"primary caps conv has {kernels.shape[0]} filters, need {channels}*{caps_dim}")
    single = features.ndim == 3
    out = conv2d(features, kernels, stride=stride, bias=bias)
    if single:
        out = reshape(out, (1,) + out.shape)
    n, _, h, w = out.shape
    caps = reshape(out, (n, channels, caps_dim, h, w))
    caps = transpose(caps, (0, 1, 3, 4, 2))
    caps = reshape(caps, (n, channels * h * w, caps_dim))
    caps = squash(caps)
    return reshape(caps, caps.shape[1:]) if single else caps


def predict_capsules(u: Tensor, transforms: Tensor) -> Tensor:
    """``u_hat[n,i,j] = W[i,j] @ u[n,i]`` with one matrix per (input, output) pair."""
    if u.shape[-2:] != (transforms.shape[0], transforms.shape[3]):
        raise DimensionError(f"capsules {u.shape} do not match transforms {transforms.shape}")
    return einsum("nik,ijdk->nijd", u, transforms)


def dynamic_routing(u_hat: Tensor, iters: int, return_history: bool = False):
    """Routing-by-agreement over predictions ``u_hat[..., N_in, N_out, dim]``.

    Returns ``(v, c)`` where ``v`` is ``[..., N_out, dim]`` and ``c`` the final
    coupling coefficients; with ``return_history`` also the list of couplings
    used at each iteration.  The logit update is skipped after the last pass.
    """
    if iters < 1:
        raise ContractError("routing needs at least one iteration")
    lead = u_hat.shape[:-3]
    n_in, n_out, dim = u_hat.shape[-3:]
    b = Tensor._wrap(np.zeros(lead + (n_in, n_out), dtype=u_hat.dtype))
    history = []
    for it in range(iters):
        c = softmax(b, axis=-1)
        history.append(c.data)
        s = tsum(mul(reshape(c, c.shape + (1,)), u_hat), axis=-3)
        v = squash(s)
        if it < iters - 1:
            agreement = tsum(mul(u_hat, reshape(v, lead + (1, n_out, dim))), axis=-1)
            b = add(b, agreement)
    if return_history:
        return v, c, history
    return v, c


def one_hot(labels, num_classes: int, dtype=np.float32) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ContractError(f"labels must lie in [0, {num_classes})")
    out = np.zeros(labels.shape + (num_classes,), dtype=dtype)
    np.put_along_axis(out, labels[..., None], 1, axis=-1)
    return out


def margin_loss(lengths: Tensor, labels, m_plus: float = M_PLUS, m_minus: float = M_MINUS,
                down_weight: float = DOWN_WEIGHT) -> Tensor:
    """Summed margin loss; ``labels`` are class indices or a one-hot array."""
    labels = np.asarray(labels)
    k = lengths.shape[-1]
    target = labels.astype(lengths.dtype) if labels.shape == lengths.shape else \
        one_hot(labels, k, dtype=lengths.dtype)
    present = square(hinge(sub(m_plus, lengths)))
    absent = square(hinge(lengths, m_minus))
    per_class = add(mul(present, target), mul(absent, down_weight * (1 - target)))
    return tsum(per_class)


def reconstruction_loss(decoded: Tensor, image: Tensor, weight: float = RECONSTRUCTION_WEIGHT) -> Tensor:
    """``weight * sum((decoded - image)^2)``."""
    image = image if isinstance(image, Tensor) else Tensor._wrap(np.asarray(image, decoded.dtype))
    if decoded.shape != image.shape:
        raise DimensionError(f"decoded {decoded.shape} vs image {image.shape}")
    return mul(tsum(square(sub(decoded, image))), weight)


def default_deltas() -> list[float]:
    return [round(-0.25 + 0.05 * i, 2) for i in range(11)]


def reconstruct(model, image, capsule_index: int | None = None) -> np.ndarray:
    """Decode one image from a single capsule (argmax-length capsule by default)."""
    from .ir.graph import run

    res = run(model, _single(model, image), training=False, decode=True,
              mask_index=capsule_index)
    return res.reconstruction.data[0].reshape(model.input_shape[-2:])


def perturb_and_decode(model, image, capsule_index: int, dim_index: int,
                       deltas: Sequence[float]) -> list[np.ndarray]:
    """Tweak one dimension of one output capsule and decode each variant, in delta order."""
    from .ir.graph import decode_capsules, run

    caps_layer = model.capsule_layer()
    if caps_layer is None or not model.decoder_layers():
        raise ContractError("model has no capsule decoder")
    if not 0 <= capsule_index < caps_layer.num_caps:
        raise ContractError(f"capsule index {capsule_index} out of range")
    if not 0 <= dim_index < caps_layer.caps_dim:
        raise ContractError(f"dimension index {dim_index} out of range")
    res = run(model, _single(model, image), training=False)
    v = res.capsules.data[0]
    shape = model.input_shape[-2:]
    images = []
    for delta in deltas:
        tweaked = v.copy()
        tweaked[capsule_index, dim_index] += np.float32(delta)
        decoded = decode_capsules(model, Tensor._wrap(tweaked[None]), np.array([capsule_index]))
        images.append(decoded.data[0].reshape(shape))
    return images


def _single(model, image) -> Tensor:
    arr = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=np.float32)
    arr = arr.reshape(tuple(model.input_shape))
    return Tensor._wrap(arr[None])
