"""Differentiable primitives.

Every function takes and returns :class:`~sortnet.autodiff.Tensor` and
records a backward closure on the active tape. Subgradient conventions:
``relu`` has derivative 0 at exactly 0, ``maximum`` and ``maxpool2d`` send
ties to the first candidate.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from sortnet.autodiff import DTYPE, Param, Tensor, make_output
from sortnet.errors import InvalidGeometry, LabelOutOfRange, NegativeInput, ShapeMismatch


_pattern_log: Optional[list] = None


@contextmanager
def activation_pattern():
    """Collect the branch decisions (ReLU masks, max winners) taken by ops run inside the block.

    Two evaluations with equal patterns lie on the same smooth piece of a
    piecewise-smooth network, which is what finite differences require.
    """
    global _pattern_log
    prev, _pattern_log = _pattern_log, []
    try:
        yield _pattern_log
    finally:
        _pattern_log = prev


def recording_pattern() -> bool:
    return _pattern_log is not None


def note_pattern(arr: np.ndarray) -> None:
    if _pattern_log is not None:
        _pattern_log.append(np.asarray(arr).tobytes())


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} differ")


# -- elementwise -------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("ew_add", a, b)
    return make_output("ew_add", a.data + b.data, (a, b), lambda g: (g, g))


def _mul_backward(g, a, b):
    return g * b, g * a


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("ew_mul", a, b)
    ad, bd = a.data, b.data
    # looked up at call time so tests can patch in a faulty rule
    return make_output("ew_mul", ad * bd, (a, b), lambda g: _mul_backward(g, ad, bd))


def maximum(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("ew_max", a, b)
    first = a.data >= b.data
    note_pattern(first)

    def backward(g):
        return np.where(first, g, 0.0), np.where(first, 0.0, g)

    return make_output("ew_max", np.maximum(a.data, b.data), (a, b), backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    note_pattern(mask)

    def backward(g):
        return (g * mask,)

    return make_output("relu", np.where(mask, a.data, 0.0), (a,), backward)


def sqrt_shift(a: Tensor, eps: float) -> Tensor:
    """Elementwise sqrt(a + eps) for non-negative ``a``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    if np.any(a.data < 0):
        raise NegativeInput("ew_sqrt_shift: input has negative entries")
    out = np.sqrt(a.data + eps)

    def backward(g):
        return (g / (2.0 * out),)

    return make_output("ew_sqrt_shift", out, (a,), backward)


def square(a: Tensor) -> Tensor:
    ad = a.data
    return make_output("square", ad * ad, (a,), lambda g: (2.0 * g * ad,))


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = a.shape
    return make_output("sum", np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape),))


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return make_output("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.shape[0], -1))


# -- convolution and pooling ---------------------------------------------------


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _pad_hw(x: np.ndarray, pad: int, value: float = 0.0) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=value)


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # [N, C, Ho, Wo, kh, kw] strided view, no copy
    v = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return v[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of ``x[N,C,H,W]`` with ``w[K,C,kh,kw]`` via im2col + GEMM."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeMismatch(f"conv2d expects 4-d input and weight, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    k, cw, kh, kw = w.shape
    if c != cw:
        raise ShapeMismatch(f"conv2d: input has {c} channels, weight expects {cw}")
    if b is not None and b.shape != (k,):
        raise ShapeMismatch(f"conv2d: bias shape {b.shape} != ({k},)")
    if stride < 1:
        raise InvalidGeometry("conv2d: stride must be >= 1")
    ho, wo = conv_output_size(h, kh, stride, pad), conv_output_size(wd, kw, stride, pad)
    if ho < 1 or wo < 1:
        raise InvalidGeometry(f"conv2d: kernel {kh}x{kw} does not fit input {h}x{wd} with pad {pad}")

    xp = _pad_hw(x.data, pad)

    def im2col():
        return _windows(xp, kh, kw, stride, ho, wo).transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)

    wmat = w.data.reshape(k, -1)
    # the column matrix is rebuilt in backward rather than kept alive
    out = (im2col() @ wmat.T).reshape(n, ho, wo, k).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data[None, :, None, None]
    else:
        out = np.ascontiguousarray(out)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, k)
        gw = (g2.T @ im2col()).reshape(w.shape) if w.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if b is not None and b.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, ho, wo, c, kh, kw)
            gxp = np.zeros(xp.shape, dtype=DTYPE)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            gx = gxp[:, :, pad : pad + h, pad : pad + wd] if pad else gxp
        return gx, gw, gb

    inputs = (x, w) if b is None else (x, w, b)
    return make_output("conv2d", out, inputs, backward)


def maxpool2d(x: Tensor, k: int, stride: int, pad: int = 0) -> Tensor:
    """Max pooling over k×k windows; padding never wins a window."""
    n, c, h, wd = x.shape
    ho, wo = conv_output_size(h, k, stride, pad), conv_output_size(wd, k, stride, pad)
    if ho < 1 or wo < 1 or pad >= k:
        raise InvalidGeometry(f"maxpool2d: window {k} stride {stride} pad {pad} invalid for {h}x{wd}")
    xp = _pad_hw(x.data, pad, -np.inf)
    win = _windows(xp, k, k, stride, ho, wo).reshape(n, c, ho, wo, k * k)
    arg = win.argmax(axis=-1)
    note_pattern(arg)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gxp = np.zeros(xp.shape, dtype=DTYPE)
        for i in range(k):
            for j in range(k):
                hit = arg == i * k + j
                gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += np.where(hit, g, 0.0)
        return (gxp[:, :, pad : pad + h, pad : pad + wd] if pad else gxp,)

    return make_output("maxpool2d", out, (x,), backward)


def global_avgpool(x: Tensor) -> Tensor:
    n, c, h, wd = x.shape
    scale = 1.0 / (h * wd)

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] * scale, x.shape),)

    return make_output("global_avgpool", x.data.mean(axis=(2, 3)), (x,), backward)


# -- dense layers ---------------------------------------------------------------


def fc(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Affine map ``x @ w + b`` with ``x[N,D]``, ``w[D,K]``, ``b[K]``."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeMismatch(f"fc: cannot multiply {x.shape} by {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeMismatch(f"fc: bias shape {b.shape} != ({w.shape[1]},)")
    xd, wdat = x.data, w.data
    out = xd @ wdat
    if b is not None:
        out = out + b.data

    def backward(g):
        gx = g @ wdat.T if x.requires_grad else None
        gw = xd.T @ g if w.requires_grad else None
        gb = g.sum(axis=0) if b is not None else None
        return gx, gw, gb

    inputs = (x, w) if b is None else (x, w, b)
    return make_output("fc", out, inputs, backward)


@dataclass
class BatchNormState:
    """Running statistics for one batchnorm layer."""

    channels: int
    momentum: float = 0.9
    eps: float = 1e-5
    running_mean: np.ndarray = field(default=None)
    running_var: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.running_mean is None:
            self.running_mean = np.zeros(self.channels, dtype=DTYPE)
        if self.running_var is None:
            self.running_var = np.ones(self.channels, dtype=DTYPE)


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, train: bool) -> Tensor:
    """Batch normalization over all axes but the channel axis (axis 1).

    In train mode the running statistics are blended as
    ``running = momentum * running + (1 - momentum) * batch``; the running
    variance uses the unbiased batch estimate.
    """
    if x.data.ndim not in (2, 4) or x.shape[1] != state.channels:
        raise ShapeMismatch(f"batchnorm: input {x.shape} does not have {state.channels} channels")
    if gamma.shape != (state.channels,) or beta.shape != (state.channels,):
        raise ShapeMismatch("batchnorm: gamma/beta must have one entry per channel")
    axes = (0,) if x.data.ndim == 2 else (0, 2, 3)
    bshape = (1, -1) if x.data.ndim == 2 else (1, -1, 1, 1)
    xd = x.data
    m = xd.size // state.channels

    if train:
        mean = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        mom = state.momentum
        state.running_mean = mom * state.running_mean + (1 - mom) * mean
        unbiased = var * m / max(m - 1, 1)
        state.running_var = mom * state.running_var + (1 - mom) * unbiased
    else:
        mean, var = state.running_mean, state.running_var

    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (xd - mean.reshape(bshape)) * inv_std.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)
    gam = gamma.data

    def backward(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gxhat = g * gam.reshape(bshape)
        if train:
            gx = (inv_std / m).reshape(bshape) * (
                m * gxhat - gxhat.sum(axis=axes).reshape(bshape) - xhat * (gxhat * xhat).sum(axis=axes).reshape(bshape)
            )
        else:
            gx = gxhat * inv_std.reshape(bshape)
        return gx, ggamma, gbeta

    return make_output("batchnorm", out, (x, gamma, beta), backward)


# -- loss --------------------------------------------------------------------------


def softmax_xent(logits: Tensor, labels) -> tuple[Tensor, np.ndarray]:
    """Mean softmax cross-entropy; also returns the argmax predictions."""
    z = logits.data
    if z.ndim != 2:
        raise ShapeMismatch(f"softmax_xent expects [N, C] logits, got {logits.shape}")
    labels = np.asarray(labels)
    n, c = z.shape
    if labels.shape != (n,):
        raise ShapeMismatch(f"softmax_xent: {labels.shape[0] if labels.ndim else 0} labels for {n} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise LabelOutOfRange(f"labels must lie in [0, {c})")
    labels = labels.astype(np.int64)
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = np.mean(logsum - shifted[rows, labels])
    pred = z.argmax(axis=1)

    def backward(g):
        p = np.exp(shifted - logsum[:, None])
        p[rows, labels] -= 1.0
        return (p * (g / n),)

    return make_output("softmax_xent", np.asarray(loss), (logits,), backward), pred


def param_count(params) -> int:
    return int(np.sum([p.size for p in params])) if params else 0


__all__ = [
    "BatchNormState",
    "Param",
    "add",
    "batchnorm",
    "conv2d",
    "conv_output_size",
    "fc",
    "flatten",
    "global_avgpool",
    "maximum",
    "maxpool2d",
    "mul",
    "param_count",
    "relu",
    "reshape",
    "softmax_xent",
    "sqrt_shift",
    "square",
    "sum",
]
