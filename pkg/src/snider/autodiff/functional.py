"""Differentiable operations on NCHW tensors.

Every function takes and returns :class:`~snider.autodiff.tensor.Tensor`
objects. No broadcasting is performed: binary operations require equal
shapes and raise :class:`ShapeError` otherwise.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import Parameter, ShapeError, Tensor, default_dtype, make_result

BN_EPS = 1e-5
BN_MOMENTUM = 0.9
BCE_CLAMP = 1e-7
LEAKY_SLOPE = 0.2


def _require_4d(x: Tensor, what: str) -> None:
    if x.data.ndim != 4:
        raise ShapeError(f"{what} expects a 4-D NCHW tensor, got shape {x.shape}")


def _same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


# --------------------------------------------------------------------------
# convolutions


def conv_output_size(size: int, kernel: int, stride: int, pad_lo: int, pad_hi: int | None = None) -> int:
    pad_hi = pad_lo if pad_hi is None else pad_hi
    span = size + pad_lo + pad_hi - kernel
    if span < 0 or span % stride:
        raise ShapeError(
            f"non-integral conv output: (size {size} + padding {pad_lo}+{pad_hi} - kernel {kernel}) "
            f"is not a non-negative multiple of stride {stride}"
        )
    return span // stride + 1


def same_padding(kernel: int, stride: int) -> tuple[int, int]:
    """(before, after) padding giving ``ceil(size / stride)`` outputs when size is a multiple of stride.

    The odd pixel of an uneven total goes after, as in TensorFlow's "SAME".
    """
    tot = max(kernel - stride, 0)
    return tot // 2, tot - tot // 2


def _pad_pair(padding) -> tuple[int, int]:
    if isinstance(padding, (tuple, list)):
        lo, hi = (int(v) for v in padding)
    else:
        lo = hi = int(padding)
    if lo < 0 or hi < 0:
        raise ValueError(f"padding must be non-negative, got {padding}")
    return lo, hi


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int | tuple[int, int] = 0) -> Tensor:
    """Cross-correlate ``x`` (B,C,H,W) with ``kernel`` (O,C,Kh,Kw) and add ``bias`` (O,).

    ``padding`` is either one amount for all four borders or a
    ``(before, after)`` pair applied to both spatial axes.
    """
    _require_4d(x, "conv2d input")
    _require_4d(kernel, "conv2d kernel")
    if stride < 1:
        raise ValueError(f"conv2d needs stride >= 1, got {stride}")
    lo, hi = _pad_pair(padding)
    B, C, H, W = x.shape
    O, Ck, Kh, Kw = kernel.shape
    if Ck != C:
        raise ShapeError(f"conv2d: kernel has {Ck} input channels, input has {C}")
    if bias.shape != (O,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({O},)")
    Ho = conv_output_size(H, Kh, stride, lo, hi)
    Wo = conv_output_size(W, Kw, stride, lo, hi)

    s = stride
    # channel-major working layout (C, B, H, W) keeps every window copy contiguous per channel
    xt = x.data.transpose(1, 0, 2, 3)
    xp = np.pad(xt, ((0, 0), (0, 0), (lo, hi), (lo, hi))) if lo or hi else np.ascontiguousarray(xt)
    cols = np.empty((C, Kh, Kw, B, Ho, Wo), dtype=x.dtype)
    for i in range(Kh):
        for j in range(Kw):
            cols[:, i, j] = xp[:, :, i : i + s * (Ho - 1) + 1 : s, j : j + s * (Wo - 1) + 1 : s]
    wmat = kernel.data.reshape(O, C * Kh * Kw)
    out = (wmat @ cols.reshape(C * Kh * Kw, B * Ho * Wo)).reshape(O, B, Ho, Wo)
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3)) + bias.data[None, :, None, None]
    del cols  # the backward pass works tap by tap from xp; keeping cols would pin K*K copies of the input

    def backward(g: np.ndarray):
        g2 = g.transpose(1, 0, 2, 3).reshape(O, B * Ho * Wo)
        taps = np.ascontiguousarray(kernel.data.transpose(2, 3, 1, 0))  # (Kh, Kw, C, O): BLAS-friendly slices
        dxp = np.zeros(xp.shape, dtype=g.dtype) if x.requires_grad else None
        dw = np.empty(kernel.shape, dtype=g.dtype) if kernel.requires_grad else None
        for i in range(Kh):
            for j in range(Kw):
                win = (slice(None), slice(None), slice(i, i + s * (Ho - 1) + 1, s), slice(j, j + s * (Wo - 1) + 1, s))
                if dw is not None:
                    dw[:, :, i, j] = g2 @ xp[win].reshape(C, B * Ho * Wo).T
                if dxp is not None:
                    dxp[win] += (taps[i, j] @ g2).reshape(C, B, Ho, Wo)
        dx = dxp[:, :, lo : lo + H, lo : lo + W].transpose(1, 0, 2, 3) if dxp is not None else None
        db = g.sum(axis=(0, 2, 3)) if bias.requires_grad else None
        return dx, dw, db

    return make_result("conv2d", out, (x, kernel, bias), backward)


def transpose_padding(kernel: int, up_factor: int) -> int:
    """Crop offset making a transposed convolution return exactly ``up_factor`` times the input size.

    Equal to the leading pad of :func:`same_padding`, so the transposed
    convolution is the exact adjoint of the strided "SAME" convolution.
    """
    return same_padding(kernel, up_factor)[0]


def conv_transpose2d(x: Tensor, kernel: Tensor, bias: Tensor, up_factor: int = 2) -> Tensor:
    """Transposed convolution enlarging H and W by ``up_factor``.

    ``kernel`` is laid out (C_in, C_out, K, K). Each input pixel scatters a
    weighted copy of the kernel onto a grid of stride ``up_factor``; the
    full result is cropped at offset :func:`transpose_padding` to size
    ``up_factor * H``. The input gradient is ``conv2d(g, kernel,
    stride=up_factor, padding=same_padding(K, up_factor))``.
    """
    _require_4d(x, "conv_transpose2d input")
    _require_4d(kernel, "conv_transpose2d kernel")
    if up_factor < 1:
        raise ValueError(f"up_factor must be >= 1, got {up_factor}")
    B, Cin, H, W = x.shape
    Ck, Cout, Kh, Kw = kernel.shape
    if Ck != Cin:
        raise ShapeError(f"conv_transpose2d: kernel expects {Ck} input channels, input has {Cin}")
    if bias.shape != (Cout,):
        raise ShapeError(f"conv_transpose2d: bias shape {bias.shape} != ({Cout},)")
    s = up_factor
    ph, pw = transpose_padding(Kh, s), transpose_padding(Kw, s)
    Ho, Wo = s * H, s * W
    full_h = max((H - 1) * s + Kh, ph + Ho)
    full_w = max((W - 1) * s + Kw, pw + Wo)

    xt = x.data.transpose(1, 0, 2, 3).reshape(Cin, B * H * W)
    wmat = kernel.data.reshape(Cin, Cout * Kh * Kw)
    cols = (wmat.T @ xt).reshape(Cout, Kh, Kw, B, H, W)
    full = np.zeros((Cout, B, full_h, full_w), dtype=x.dtype)
    for i in range(Kh):
        for j in range(Kw):
            full[:, :, i : i + s * (H - 1) + 1 : s, j : j + s * (W - 1) + 1 : s] += cols[:, i, j]
    out = full[:, :, ph : ph + Ho, pw : pw + Wo].transpose(1, 0, 2, 3) + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def backward(g: np.ndarray):
        gfull = np.zeros((Cout, B, full_h, full_w), dtype=g.dtype)
        gfull[:, :, ph : ph + Ho, pw : pw + Wo] = g.transpose(1, 0, 2, 3)
        gcols = np.empty((Cout, Kh, Kw, B, H, W), dtype=g.dtype)
        for i in range(Kh):
            for j in range(Kw):
                gcols[:, i, j] = gfull[:, :, i : i + s * (H - 1) + 1 : s, j : j + s * (W - 1) + 1 : s]
        gcols = gcols.reshape(Cout * Kh * Kw, B * H * W)
        dx = (wmat @ gcols).reshape(Cin, B, H, W).transpose(1, 0, 2, 3) if x.requires_grad else None
        dw = (xt @ gcols.T).reshape(kernel.shape) if kernel.requires_grad else None
        db = g.sum(axis=(0, 2, 3)) if bias.requires_grad else None
        return dx, dw, db

    return make_result("conv_transpose2d", out, (x, kernel, bias), backward)


# --------------------------------------------------------------------------
# resampling and channel plumbing


class BranchTrace:
    """Branch choices of the nonsmooth ops, recorded in evaluation order.

    leaky_relu (input sign), l1_loss (residual sign), maxpool2x2 (argmax)
    and bce_loss (clamp) report which smooth piece they evaluated. With
    ``replay`` set they reuse the replayed choices instead, which evaluates
    the smooth piece holding the recorded point. Finite differences taken
    that way stay valid when the perturbation would cross a kink.
    """

    def __init__(self, replay: "BranchTrace | None" = None):
        self.choices: list[np.ndarray] = []
        self.live: list[np.ndarray] = []
        self.replay = replay

    def visit(self, choice: np.ndarray) -> np.ndarray:
        self.live.append(choice)
        if self.replay is not None:
            ref = self.replay.choices[len(self.choices)]
            if ref.shape != choice.shape:
                raise ShapeError(f"branch replay: recorded {ref.shape} vs live {choice.shape}")
            choice = ref
        self.choices.append(choice)
        return choice

    def crossed(self) -> bool:
        """True when some live branch differed from the replayed one."""
        return any(not np.array_equal(a, b) for a, b in zip(self.live, self.choices))


_TRACES: list[BranchTrace] = []


@contextmanager
def trace_branches(replay: BranchTrace | None = None):
    trace = BranchTrace(replay)
    _TRACES.append(trace)
    try:
        yield trace
    finally:
        _TRACES.remove(trace)


def _branch(choice: np.ndarray) -> np.ndarray:
    return _TRACES[-1].visit(choice) if _TRACES else choice


def maxpool2x2(x: Tensor) -> Tensor:
    _require_4d(x, "maxpool2x2")
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"maxpool2x2 needs even spatial dims, got {H}x{W}")
    blocks = x.data.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H // 2, W // 2, 4)
    # argmax returns the first maximum, i.e. row-major tie breaking inside each block
    idx = _branch(blocks.argmax(axis=-1))
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(g: np.ndarray):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        dx = gb.reshape(B, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W)
        return (dx,)

    return make_result("maxpool2x2", np.ascontiguousarray(out), (x,), backward)


def upsample_nearest2x(x: Tensor) -> Tensor:
    _require_4d(x, "upsample_nearest2x")
    B, C, H, W = x.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def backward(g: np.ndarray):
        return (g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)),)

    return make_result("upsample_nearest2x", out, (x,), backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    _require_4d(a, "concat_channels")
    _require_4d(b, "concat_channels")
    if (a.shape[0], a.shape[2:]) != (b.shape[0], b.shape[2:]):
        raise ShapeError(f"concat_channels: batch/spatial mismatch {a.shape} vs {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)

    def backward(g: np.ndarray):
        return g[:, :ca], g[:, ca:]

    return make_result("concat_channels", out, (a, b), backward)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    _require_4d(x, "slice_channels")
    C = x.shape[1]
    if not 0 <= start < stop <= C:
        raise ShapeError(f"slice_channels: bad range [{start}, {stop}) for {C} channels")
    out = np.ascontiguousarray(x.data[:, start:stop])

    def backward(g: np.ndarray):
        dx = np.zeros_like(x.data, dtype=g.dtype)
        dx[:, start:stop] = g
        return (dx,)

    return make_result("slice_channels", out, (x,), backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = x.data.reshape(tuple(shape))
    if out.size != x.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {tuple(shape)}")
    src = x.shape

    def backward(g: np.ndarray):
        return (g.reshape(src),)

    return make_result("reshape", out, (x,), backward)


# --------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")

    def backward(g: np.ndarray):
        return g, g

    return make_result("add", a.data + b.data, (a, b), backward)


def scale(x: Tensor, factor: float) -> Tensor:
    def backward(g: np.ndarray):
        return (g * factor,)

    return make_result("scale", x.data * x.dtype.type(factor), (x,), backward)


def total(x: Tensor) -> Tensor:
    """Sum of all elements as a scalar tensor."""

    def backward(g: np.ndarray):
        return (np.full(x.shape, g, dtype=g.dtype),)

    return make_result("sum", np.asarray(x.data.sum(), dtype=x.dtype), (x,), backward)


def weighted_sum(terms: Sequence[Tensor], weights: Sequence[float]) -> Tensor:
    """``sum(w_k * t_k)`` over scalar tensors, accumulated left to right."""
    if len(terms) != len(weights) or not terms:
        raise ValueError("weighted_sum needs matching, non-empty terms and weights")
    for t in terms:
        if t.size != 1:
            raise ShapeError(f"weighted_sum expects scalar terms, got shape {t.shape}")
    dt = terms[0].dtype
    acc = dt.type(0)
    for t, w in zip(terms, weights):
        acc = acc + dt.type(w) * t.data.reshape(())
    ws = tuple(weights)

    def backward(g: np.ndarray):
        return tuple(np.asarray(g * w, dtype=g.dtype).reshape(t.shape) for t, w in zip(terms, ws))

    return make_result("weighted_sum", np.asarray(acc, dtype=dt), tuple(terms), backward)


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    pos = _branch(x.data > 0)
    s = x.dtype.type(slope)
    out = np.where(pos, x.data, s * x.data)

    def backward(g: np.ndarray):
        return (np.where(pos, g, s * g),)

    return make_result("leaky_relu", out, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)

    def backward(g: np.ndarray):
        return (g * out * (1 - out),)

    return make_result("sigmoid", out, (x,), backward)


# --------------------------------------------------------------------------
# batch normalisation


@dataclass
class BatchNormState:
    """Running per-channel statistics used in eval mode."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    @classmethod
    def fresh(cls, channels: int, dtype=None) -> "BatchNormState":
        dt = dtype or default_dtype()
        return cls(np.zeros(channels, dtype=dt), np.ones(channels, dtype=dt))


def batchnorm2d(x: Tensor, gamma: Parameter, beta: Parameter, state: BatchNormState, training: bool) -> Tensor:
    """Per-channel batch normalisation.

    In training mode the batch statistics are used and folded into
    ``state`` as ``running = momentum * running + (1 - momentum) * batch``.
    """
    _require_4d(x, "batchnorm2d")
    B, C, H, W = x.shape
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"batchnorm2d: gamma/beta must have shape ({C},)")
    n = B * H * W
    g_ = gamma.data[None, :, None, None]
    b_ = beta.data[None, :, None, None]
    if training:
        if n < 2:
            raise ShapeError(f"batchnorm2d: training needs batch*H*W >= 2, got {n}")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        m = state.momentum
        state.running_mean[...] = m * state.running_mean + (1 - m) * mean
        state.running_var[...] = m * state.running_var + (1 - m) * var * (n / (n - 1))
    else:
        mean, var = state.running_mean, state.running_var
    inv_std = (1.0 / np.sqrt(var + state.eps)).astype(x.dtype, copy=False)
    xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = g_ * xhat + b_

    def backward(g: np.ndarray):
        dgamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        dbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        dxhat = g * g_
        if training:
            sum_d = dxhat.sum(axis=(0, 2, 3), keepdims=True)
            sum_dx = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            dx = (inv_std[None, :, None, None] / n) * (n * dxhat - sum_d - xhat * sum_dx)
        else:
            dx = dxhat * inv_std[None, :, None, None]
        return dx, dgamma, dbeta

    return make_result("batchnorm2d", np.ascontiguousarray(out), (x, gamma, beta), backward)


# --------------------------------------------------------------------------
# losses (all return 0-d tensors)


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    _same_shape(pred, target, "mse_loss")
    diff = pred.data - target.data
    n = diff.size

    def backward(g: np.ndarray):
        return (g * (2.0 / n) * diff).astype(pred.dtype, copy=False), None

    return make_result("mse_loss", np.asarray(np.mean(diff * diff), dtype=pred.dtype), (pred, target), backward)


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    _same_shape(pred, target, "l1_loss")
    diff = pred.data - target.data
    n = diff.size
    sign = _branch(np.sign(diff))

    def backward(g: np.ndarray):
        return (g * sign / n).astype(pred.dtype, copy=False), None

    return make_result("l1_loss", np.asarray(np.mean(sign * diff), dtype=pred.dtype), (pred, target), backward)


def bce_loss(prob: Tensor, target: Tensor) -> Tensor:
    """Mean binary cross-entropy with the probability clamped to [1e-7, 1 - 1e-7]."""
    _same_shape(prob, target, "bce_loss")
    t = target.data
    if not np.all((t == 0) | (t == 1)):
        raise ValueError("bce_loss: target must be {0,1}-valued")
    lo, hi = BCE_CLAMP, 1.0 - BCE_CLAMP
    inside = _branch((prob.data >= lo) & (prob.data <= hi))
    p = np.where(inside, prob.data, np.clip(prob.data, lo, hi))
    n = p.size
    loss = -np.mean(t * np.log(p) + (1 - t) * np.log1p(-p))

    def backward(g: np.ndarray):
        dp = (-(t / p) + (1 - t) / (1 - p)) / n
        return (np.where(inside, g * dp, 0).astype(prob.dtype, copy=False), None)

    return make_result("bce_loss", np.asarray(loss, dtype=prob.dtype), (prob, target), backward)
