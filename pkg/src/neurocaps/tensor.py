"""Dense float32 tensors with tape-based reverse-mode differentiation.

Every op here is a pure function of its inputs.  When a :class:`Tape` is
active (``with Tape() as tape:``) and at least one operand is tracked by it,
the op appends a node holding a vector-Jacobian closure.  :func:`backward`
then walks the tape once in reverse id order.

Ops accept an optional leading batch axis wherever the single-sample form is
``[C, H, W]`` or ``[N]``.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError, NumericError

_local = threading.local()


def current_tape() -> "Tape | None":
    return getattr(_local, "tape", None)


class Tensor:
    """Immutable-shape n-d array of IEEE-754 reals plus an optional tape handle."""

    __slots__ = ("data", "node_id", "_tape")

    def __init__(self, data, dtype=np.float32):
        arr = np.array(data, dtype=dtype, order="C", copy=True)
        if any(d <= 0 for d in arr.shape):
            raise DimensionError(f"dimensions must be positive, got {arr.shape}")
        self.data = arr
        self.node_id = None
        self._tape = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = np.ascontiguousarray(arr)
        t.node_id = None
        t._tape = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        tracked = "" if self.node_id is None else f", node={self.node_id}"
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tracked})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


class _Node:
    __slots__ = ("op", "parents", "vjp")

    def __init__(self, op, parents, vjp):
        self.op = op
        self.parents = parents
        self.vjp = vjp


class Tape:
    """Append-only record of differentiable ops; one tape per training thread."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._outer = None

    def __enter__(self) -> "Tape":
        self._outer = current_tape()
        _local.tape = self
        return self

    def __exit__(self, *exc):
        _local.tape = self._outer
        return False

    def tracks(self, t) -> bool:
        return isinstance(t, Tensor) and t._tape is self and t.node_id is not None

    def watch(self, *tensors: Tensor) -> None:
        """Register tensors as leaves (parameters or inputs to differentiate)."""
        for t in tensors:
            t._tape = self
            t.node_id = len(self.nodes)
            self.nodes.append(_Node("leaf", (), None))

    def _record(self, op, inputs, out: Tensor, vjp) -> None:
        parents = tuple(x.node_id if self.tracks(x) else None for x in inputs)
        out._tape = self
        out.node_id = len(self.nodes)
        self.nodes.append(_Node(op, parents, vjp))

    def gradient(self, loss: Tensor, tensors: Sequence[Tensor]) -> list[np.ndarray]:
        grads = backward(self, loss)
        out = []
        for t in tensors:
            g = grads.get(t.node_id) if self.tracks(t) else None
            out.append(np.zeros_like(t.data) if g is None else g)
        return out


def backward(tape: Tape, loss: Tensor) -> dict[int, np.ndarray]:
    """Gradients of a scalar ``loss`` w.r.t. every leaf reachable on ``tape``.

    Returns a map from leaf node id to gradient array.  A loss that does not
    depend on any tracked tensor yields an empty map (all-zero gradients).
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not tape.tracks(loss):
        return {}
    pending = {loss.node_id: np.ones_like(loss.data)}
    leaves = {}
    for nid in range(loss.node_id, -1, -1):
        g = pending.pop(nid, None)
        if g is None:
            continue
        node = tape.nodes[nid]
        if node.vjp is None:
            leaves[nid] = g
            continue
        needs = tuple(pid is not None for pid in node.parents)
        for pid, pg in zip(node.parents, node.vjp(g, needs)):
            if pid is None or pg is None:
                continue
            if pid in pending:
                pending[pid] = pending[pid] + pg
            else:
                pending[pid] = pg
    return leaves


# --------------------------------------------------------------------------
# plumbing


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float32
    return Tensor._wrap(np.asarray(x, dtype=dtype))


def _emit(op: str, inputs: Sequence, out: np.ndarray, vjp: Callable) -> Tensor:
    t = Tensor._wrap(out)
    tape = current_tape()
    if tape is not None and any(tape.tracks(x) for x in inputs):
        tape._record(op, inputs, t, vjp)
    return t


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)), dtype=np.float64).astype(g.dtype)
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True, dtype=np.float64).astype(g.dtype)
    return g.reshape(shape)


def _binary_pair(a, b):
    like = a if isinstance(a, Tensor) else b if isinstance(b, Tensor) else None
    return _as_tensor(a, like), _as_tensor(b, like)


# --------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _binary_pair(a, b)
    sa, sb = a.shape, b.shape
    return _emit("add", (a, b), a.data + b.data,
                 lambda g, needs: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _binary_pair(a, b)
    sa, sb = a.shape, b.shape
    return _emit("sub", (a, b), a.data - b.data,
                 lambda g, needs: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _binary_pair(a, b)
    ad, bd = a.data, b.data
    return _emit("mul", (a, b), ad * bd,
                 lambda g, needs: (_unbroadcast(g * bd, ad.shape) if needs[0] else None,
                                   _unbroadcast(g * ad, bd.shape) if needs[1] else None))


def div(a, b) -> Tensor:
    a, b = _binary_pair(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def vjp(g, needs):
        ga = g / bd
        return _unbroadcast(ga, ad.shape), _unbroadcast(-ga * out, bd.shape)

    return _emit("div", (a, b), out, vjp)


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _emit("square", (x,), xd * xd, lambda g, needs: (2 * g * xd,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _emit("sqrt", (x,), out, lambda g, needs: (g / (2 * out),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _emit("exp", (x,), out, lambda g, needs: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _emit("log", (x,), np.log(xd), lambda g, needs: (g / xd,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit("relu", (x,), np.where(mask, x.data, 0).astype(x.dtype),
                 lambda g, needs: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    # split form avoids exp overflow for large |x|
    e = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1 / (1 + e), e / (1 + e)).astype(xd.dtype)
    return _emit("sigmoid", (x,), out, lambda g, needs: (g * out * (1 - out),))


def hinge(x, margin: float = 0.0) -> Tensor:
    """``max(0, x - margin)`` elementwise."""
    x = _as_tensor(x)
    z = x.data - x.dtype.type(margin)
    mask = z > 0
    return _emit("hinge", (x,), np.where(mask, z, 0).astype(x.dtype), lambda g, needs: (g * mask,))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    z = xd - xd.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = (e / e.sum(axis=axis, keepdims=True, dtype=np.float64)).astype(xd.dtype)

    def vjp(g, needs):
        dot = (g * out).sum(axis=axis, keepdims=True, dtype=np.float64).astype(xd.dtype)
        return (out * (g - dot),)

    return _emit("softmax", (x,), out, vjp)


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "softmax":
        return softmax(x, axis=-1)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ContractError(f"unknown activation {kind!r}")


# --------------------------------------------------------------------------
# shape and reductions


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return _emit("reshape", (x,), out, lambda g, needs: (g.reshape(src),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _emit("transpose", (x,), x.data.transpose(axes), lambda g, needs: (g.transpose(inv),))


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    xd = x.data
    out = np.asarray(xd.sum(axis=axis, keepdims=keepdims, dtype=np.float64), dtype=xd.dtype)

    def vjp(g, needs):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, xd.shape).astype(xd.dtype),)

    return _emit("sum", (x,), out, vjp)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(tsum(x, axis, keepdims), 1.0 / n)


def matmul(a, b) -> Tensor:
    a, b = _binary_pair(a, b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise DimensionError("matmul needs operands of rank >= 2")
    if ad.shape[-1] != bd.shape[-2]:
        raise DimensionError(f"matmul inner dims differ: {ad.shape} @ {bd.shape}")

    def vjp(g, needs):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if needs[0] else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if needs[1] else None
        return ga, gb

    return _emit("matmul", (a, b), ad @ bd, vjp)


def einsum(subscripts: str, a, b) -> Tensor:
    """Two-operand einsum; every input index must appear in the output or the other operand."""
    a, b = _binary_pair(a, b)
    ins, out_sub = subscripts.replace(" ", "").split("->")
    sa, sb = ins.split(",")
    for own, other in ((sa, sb), (sb, sa)):
        if len(set(own)) != len(own) or any(c not in out_sub and c not in other for c in own):
            raise ContractError(f"einsum {subscripts!r} not supported by the differentiable path")
    ad, bd = a.data, b.data
    out = np.einsum(subscripts, ad, bd, optimize=True)

    def vjp(g, needs):
        return (np.einsum(f"{out_sub},{sb}->{sa}", g, bd, optimize=True) if needs[0] else None,
                np.einsum(f"{out_sub},{sa}->{sb}", g, ad, optimize=True) if needs[1] else None)

    return _emit("einsum", (a, b), out, vjp)


def norm(x: Tensor, axis: int = -1, keepdims: bool = False, eps: float = 0.0) -> Tensor:
    return sqrt(add(tsum(square(x), axis=axis, keepdims=keepdims), eps))


# --------------------------------------------------------------------------
# layers


def _batched(x: Tensor, rank: int) -> tuple[Tensor, bool]:
    if x.ndim == rank:
        return reshape(x, (1,) + x.shape), True
    if x.ndim == rank + 1:
        return x, False
    raise DimensionError(f"expected rank {rank} or {rank + 1} input, got shape {x.shape}")


def _conv_out(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, kernels: Tensor, stride: int = 1, padding: int = 0,
           bias: Tensor | None = None) -> Tensor:
    """Cross-correlation of ``[N?, Cin, H, W]`` with ``[Cout, Cin, kH, kW]`` kernels."""
    if stride < 1 or padding < 0:
        raise ContractError("stride must be >= 1 and padding >= 0")
    xb, squeeze = _batched(x, 3)
    out = _conv2d_batched(xb, kernels, stride, padding, bias)
    return reshape(out, out.shape[1:]) if squeeze else out


def _conv2d_batched(x, kernels, stride, padding, bias):
    n, cin, h, w = x.shape
    if kernels.ndim != 4:
        raise DimensionError(f"kernels must be [Cout,Cin,kH,kW], got {kernels.shape}")
    cout, kcin, kh, kw = kernels.shape
    if kcin != cin:
        raise DimensionError(f"input has {cin} channels but kernels expect {kcin}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise DimensionError(f"kernel {kh}x{kw} larger than padded input {h}x{w}")
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"bias shape {bias.shape} != ({cout},)")
    ho, wo = _conv_out(h, kh, stride, padding), _conv_out(w, kw, stride, padding)
    xd = x.data
    if padding:
        xd = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xd, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cin * kh * kw)
    kmat = kernels.data.reshape(cout, -1)
    y = cols @ kmat.T
    if bias is not None:
        y += bias.data
    out = y.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    padded_shape = xd.shape

    def vjp(g, needs):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gk = (gm.T @ cols).reshape(kernels.shape) if needs[1] else None
        gb = gm.sum(axis=0, dtype=np.float64).astype(gm.dtype) if bias is not None and needs[2] else None
        dx = None
        if needs[0]:
            # channel-last scatter keeps every strided add contiguous over (n, cin)
            g_pos = np.ascontiguousarray(g.transpose(2, 3, 0, 1)).reshape(ho * wo * n, cout)
            k_pos = np.ascontiguousarray(kernels.data.transpose(2, 3, 0, 1))
            dx_t = np.zeros((padded_shape[2], padded_shape[3], n, cin), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dx_t[i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        (g_pos @ k_pos[i, j]).reshape(ho, wo, n, cin)
            dx = dx_t.transpose(2, 3, 0, 1)
            if padding:
                dx = dx[:, :, padding:-padding, padding:-padding]
            dx = np.ascontiguousarray(dx)
        return dx, gk, gb

    inputs = (x, kernels) if bias is None else (x, kernels, bias)
    return _emit("conv2d", inputs, out, vjp)


def pool2d(x: Tensor, window: int, stride: int | None = None, mode: str = "avg") -> Tensor:
    """Windowed average or max over the two trailing axes.

    Max-pool routes each window's gradient to its first row-major argmax.
    """
    stride = window if stride is None else stride
    if mode not in ("avg", "max"):
        raise ContractError(f"pool mode must be avg or max, got {mode!r}")
    xb, squeeze = _batched(x, 3)
    n, c, h, w = xb.shape
    if window > h or window > w:
        raise DimensionError(f"pool window {window} larger than input {h}x{w}")
    ho, wo = _conv_out(h, window, stride, 0), _conv_out(w, window, stride, 0)
    win = sliding_window_view(xb.data, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    win = win[:, :, :ho, :wo].reshape(n, c, ho, wo, window * window)
    dtype = xb.dtype
    if mode == "avg":
        out = win.mean(axis=-1, dtype=np.float64).astype(dtype)
        scale = dtype.type(1.0 / (window * window))

        def vjp(g, needs):
            dx = np.zeros((n, c, h, w), dtype=dtype)
            gs = g * scale
            for i in range(window):
                for j in range(window):
                    dx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gs
            return (dx,)
    else:
        idx = win.argmax(axis=-1)
        out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

        def vjp(g, needs):
            dx = np.zeros((n, c, h, w), dtype=dtype)
            for i in range(window):
                for j in range(window):
                    hit = idx == i * window + j
                    dx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += g * hit
            return (dx,)

    res = _emit(f"{mode}pool2d", (xb,), out, vjp)
    return reshape(res, res.shape[1:]) if squeeze else res


def pad2d(x: Tensor, amount: int) -> Tensor:
    if amount < 0:
        raise ContractError("padding amount must be >= 0")
    if amount == 0:
        return x
    widths = [(0, 0)] * (x.ndim - 2) + [(amount, amount)] * 2
    out = np.pad(x.data, widths)
    return _emit("pad2d", (x,), out, lambda g, needs: (g[..., amount:-amount, amount:-amount],))


def upsample2d(x: Tensor, factor: int) -> Tensor:
    """Nearest-neighbour replication over the two trailing axes."""
    out = np.repeat(np.repeat(x.data, factor, axis=-2), factor, axis=-1)
    shp = x.shape

    def vjp(g, needs):
        g = g.reshape(shp[:-2] + (shp[-2], factor, shp[-1], factor))
        return (g.sum(axis=(-3, -1), dtype=np.float64).astype(g.dtype),)

    return _emit("upsample2d", (x,), out, vjp)


def dense(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """``W @ x + b`` for ``x`` of shape ``[N]`` or ``[B, N]``."""
    if weights.ndim != 2 or x.shape[-1] != weights.shape[1]:
        raise DimensionError(f"dense: input {x.shape} incompatible with weights {weights.shape}")
    if bias.shape != (weights.shape[0],):
        raise DimensionError(f"dense: bias {bias.shape} != ({weights.shape[0]},)")
    xd, wd = x.data, weights.data
    out = xd @ wd.T + bias.data

    def vjp(g, needs):
        gx = g @ wd if needs[0] else None
        if g.ndim == 1:
            gw = np.outer(g, xd)
            gb = g
        else:
            gw = g.T @ xd
            gb = g.sum(axis=0, dtype=np.float64).astype(g.dtype)
        return gx, gw, gb

    return _emit("dense", (x, weights, bias), out, vjp)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Summed softmax cross-entropy of ``[B, K]`` logits against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    ld = logits.data
    z = ld - ld.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    rows = np.arange(ld.shape[0])
    out = np.asarray(-logp[rows, labels].sum(dtype=np.float64), dtype=ld.dtype)

    def vjp(g, needs):
        p = np.exp(logp)
        p[rows, labels] -= 1
        return (g * p,)

    return _emit("cross_entropy", (logits,), out, vjp)


# --------------------------------------------------------------------------
# gradient checking


def grad_check(function: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-3) -> float:
    """Max relative error between tape gradients and central differences.

    Evaluated in float64 so the check measures derivative formulas, not
    single-precision round-off.
    """
    x64 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if not np.all(np.isfinite(x64)):
        raise NumericError("grad_check input is not finite")
    with Tape() as tape:
        xt = Tensor(x64, dtype=np.float64)
        tape.watch(xt)
        y = function(xt)
        if y.data.size != 1:
            raise ContractError("grad_check function must be scalar-valued")
        analytic = tape.gradient(y, [xt])[0]
    numeric = np.empty_like(x64)
    flat = x64.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = function(Tensor(x64, dtype=np.float64)).item()
        flat[i] = orig - eps
        fm = function(Tensor(x64, dtype=np.float64)).item()
        flat[i] = orig
        numeric.reshape(-1)[i] = (fp - fm) / (2 * eps)
    if not (np.all(np.isfinite(numeric)) and np.all(np.isfinite(analytic))):
        raise NumericError("non-finite gradient encountered in grad_check")
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
