"""Dense float tensors and the forward kernels used by the segmentation model.

All image-like data uses N x C x H x W layout. Kernels are pure functions
returning new tensors; a ``Tensor`` never changes after construction.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

_FLOAT_TYPES = (np.float32, np.float64)

# Finite-value checking after every kernel; off by default because it
# doubles the cost of the cheap elementwise ops.
CHECK_FINITE = os.environ.get("MSASEG_DEBUG", "") not in ("", "0")


class ShapeError(ValueError):
    """Raised when operand shapes are inconsistent."""


class Tensor:
    """Immutable N-d float array; float32 unless float64 is asked for."""

    __slots__ = ("data",)

    def __init__(self, data, dtype=np.float32):
        if np.dtype(dtype) not in _FLOAT_TYPES:
            raise TypeError(f"tensors hold float32 or float64, not {np.dtype(dtype)}")
        arr = np.array(data, dtype=dtype, order="C", copy=True)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if any(d < 1 for d in arr.shape):
            raise ShapeError(f"all dimensions must be >= 1, got {arr.shape}")
        arr.flags.writeable = False
        if CHECK_FINITE and not np.all(np.isfinite(arr)):
            raise FloatingPointError("tensor contains NaN or Inf")
        self.data = arr

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        """Writable copy of the underlying buffer."""
        return np.array(self.data)

    def astype(self, dtype) -> Tensor:
        return Tensor(self.data, dtype=dtype)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"

    @classmethod
    def zeros(cls, shape, dtype=np.float32) -> Tensor:
        return cls(np.zeros(shape, dtype=dtype))

    @classmethod
    def ones(cls, shape, dtype=np.float32) -> Tensor:
        return cls(np.ones(shape, dtype=dtype))


def _wrap(arr: np.ndarray) -> Tensor:
    # Internal constructor for freshly allocated kernel outputs (no copy).
    t = Tensor.__new__(Tensor)
    arr = np.ascontiguousarray(arr)
    if CHECK_FINITE and not np.all(np.isfinite(arr)):
        raise FloatingPointError("kernel produced NaN or Inf")
    arr.flags.writeable = False
    t.data = arr
    return t


def _check_4d(t: Tensor, what: str) -> None:
    if len(t.shape) != 4:
        raise ShapeError(f"{what} must be 4-d (N, C, H, W), got shape {t.shape}")


def _pair(v) -> tuple[int, int]:
    if isinstance(v, int):
        return (v, v)
    a, b = v
    return (int(a), int(b))


@dataclass(frozen=True)
class Conv2dSpec:
    in_channels: int
    out_channels: int
    kernel: tuple[int, int] = (3, 3)
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)
    dilation: tuple[int, int] = (1, 1)

    def __post_init__(self):
        for name in ("kernel", "stride", "padding", "dilation"):
            object.__setattr__(self, name, _pair(getattr(self, name)))
        if self.in_channels < 1 or self.out_channels < 1:
            raise ShapeError("channel counts must be positive")
        if min(self.kernel) < 1 or min(self.stride) < 1 or min(self.dilation) < 1:
            raise ShapeError("kernel, stride and dilation must be positive")
        if min(self.padding) < 0:
            raise ShapeError("padding must be non-negative")

    def extent(self) -> tuple[int, int]:
        """Effective kernel extent including the dilation gaps."""
        return tuple((k - 1) * d + 1 for k, d in zip(self.kernel, self.dilation))

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        out = []
        for axis, size, p, e, s in zip(("height", "width"), (h, w), self.padding, self.extent(), self.stride):
            if e > size + 2 * p:
                raise ShapeError(
                    f"effective kernel {axis} {e} exceeds padded input {axis} {size + 2 * p}"
                )
            out.append((size + 2 * p - e) // s + 1)
        return tuple(out)


def _pad_hw(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def im2col(x: np.ndarray, spec: Conv2dSpec) -> np.ndarray:
    """Patch matrix of shape (Cin*kh*kw, N*H'*W').

    Rows follow the weight's (Cin, kh, kw) order, columns run over (N, H', W'),
    so the whole convolution is one matrix product.
    """
    n, c, h, w = x.shape
    ho, wo = spec.output_size(h, w)
    (kh, kw), (sh, sw), (dh, dw) = spec.kernel, spec.stride, spec.dilation
    xp = _pad_hw(x, *spec.padding).transpose(1, 0, 2, 3)
    if kh == kw == 1 and sh == sw == 1:
        return np.ascontiguousarray(xp).reshape(c, n * ho * wo)
    taps = []
    for i in range(kh):
        for j in range(kw):
            y0, x0 = i * dh, j * dw
            taps.append(xp[:, :, y0:y0 + sh * (ho - 1) + 1:sh, x0:x0 + sw * (wo - 1) + 1:sw])
    return np.stack(taps, axis=1).reshape(c * kh * kw, n * ho * wo)


def col2im(cols: np.ndarray, x_shape: tuple, spec: Conv2dSpec) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patch gradients back to the input."""
    n, c, h, w = x_shape
    ho, wo = spec.output_size(h, w)
    (kh, kw), (sh, sw), (dh, dw) = spec.kernel, spec.stride, spec.dilation
    ph, pw = spec.padding
    if kh == kw == 1 and sh == sw == 1 and ph == pw == 0:
        return cols.reshape(c, n, h, w).transpose(1, 0, 2, 3)
    cols = cols.reshape(c, kh * kw, n, ho, wo)
    gp = np.zeros((c, n, h + 2 * ph, w + 2 * pw), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            y0, x0 = i * dh, j * dw
            gp[:, :, y0:y0 + sh * (ho - 1) + 1:sh, x0:x0 + sw * (wo - 1) + 1:sw] += cols[:, i * kw + j]
    return gp[:, :, ph:ph + h, pw:pw + w].transpose(1, 0, 2, 3)


def _check_conv(input: Tensor, weight: Tensor, bias: Tensor | None, spec: Conv2dSpec) -> None:
    _check_4d(input, "conv2d input")
    _check_4d(weight, "conv2d weight")
    if input.shape[1] != spec.in_channels:
        raise ShapeError(f"input channels {input.shape[1]} != spec in_channels {spec.in_channels}")
    expected = (spec.out_channels, spec.in_channels, *spec.kernel)
    if weight.shape != expected:
        raise ShapeError(f"weight shape {weight.shape} != expected {expected}")
    if bias is not None and bias.shape != (spec.out_channels,):
        raise ShapeError(f"bias shape {bias.shape} != ({spec.out_channels},)")
    if weight.dtype != input.dtype:
        raise TypeError(f"dtype mismatch: input {input.dtype}, weight {weight.dtype}")


def conv2d_cols(input: Tensor, weight: Tensor, bias: Tensor | None, spec: Conv2dSpec):
    """Forward convolution that also hands back the patch matrix for reuse."""
    _check_conv(input, weight, bias, spec)
    n = input.shape[0]
    ho, wo = spec.output_size(*input.shape[2:])
    cols = im2col(input.data, spec)
    out = weight.data.reshape(spec.out_channels, -1) @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(spec.out_channels, n, ho, wo).transpose(1, 0, 2, 3)
    return _wrap(out), cols


def conv2d(input: Tensor, weight: Tensor, bias: Tensor | None, spec: Conv2dSpec) -> Tensor:
    """Zero-padded, dilated 2-d cross-correlation (no kernel flip)."""
    return conv2d_cols(input, weight, bias, spec)[0]


def resize_matrix(in_size: int, out_size: int, align_corners: bool = False, dtype=np.float32) -> np.ndarray:
    """Row-stochastic (out_size x in_size) matrix of 1-d linear interpolation weights."""
    m = np.zeros((out_size, in_size), dtype=np.float64)
    for o in range(out_size):
        if align_corners:
            src = 0.0 if out_size == 1 else o * (in_size - 1) / (out_size - 1)
        else:
            src = max((o + 0.5) * in_size / out_size - 0.5, 0.0)
        i0 = min(int(math.floor(src)), in_size - 1)
        i1 = min(i0 + 1, in_size - 1)
        frac = src - i0
        m[o, i0] += 1.0 - frac
        m[o, i1] += frac
    return m.astype(dtype)


def bilinear_resize(input: Tensor, out_h: int, out_w: int, align_corners: bool = False) -> Tensor:
    _check_4d(input, "bilinear_resize input")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"output size must be positive, got {(out_h, out_w)}")
    h, w = input.shape[2:]
    if (h, w) == (out_h, out_w):
        return input
    ry = resize_matrix(h, out_h, align_corners, input.dtype)
    rx = resize_matrix(w, out_w, align_corners, input.dtype)
    return _wrap(ry @ input.data @ rx.T)


def _pool_windows(x: np.ndarray, window: int, stride: int) -> np.ndarray:
    n, c, h, w = x.shape
    if window > h or window > w:
        raise ShapeError(f"pool window {window} exceeds input extent {(h, w)}")
    v = np.lib.stride_tricks.sliding_window_view(x, (window, window), axis=(2, 3))
    v = v[:, :, ::stride, ::stride]
    return v.reshape(*v.shape[:4], window * window)


def maxpool2d_with_indices(input: Tensor, window: int = 2, stride: int | None = None):
    """Max pooling; also returns the flat (row-major) argmax within each window.

    Ties resolve to the first element in row-major order.
    """
    _check_4d(input, "maxpool2d input")
    stride = window if stride is None else stride
    win = _pool_windows(input.data, window, stride)
    idx = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return _wrap(out), idx


def maxpool2d(input: Tensor, window: int = 2, stride: int | None = None) -> Tensor:
    return maxpool2d_with_indices(input, window, stride)[0]


def avgpool2d(input: Tensor, window: int = 2, stride: int | None = None) -> Tensor:
    _check_4d(input, "avgpool2d input")
    stride = window if stride is None else stride
    win = _pool_windows(input.data, window, stride)
    return _wrap(win.mean(axis=-1, dtype=input.dtype))


def softmax_channels(input: Tensor) -> Tensor:
    """Per-pixel softmax over axis 1, stabilised by max subtraction."""
    _check_4d(input, "softmax_channels input")
    z = input.data - input.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    return _wrap(e / e.sum(axis=1, keepdims=True))


def log_softmax_channels(input: Tensor) -> Tensor:
    _check_4d(input, "log_softmax_channels input")
    z = input.data - input.data.max(axis=1, keepdims=True)
    return _wrap(z - np.log(np.exp(z).sum(axis=1, keepdims=True)))


def sigmoid(input: Tensor) -> Tensor:
    x = input.data
    # Split by sign so exp never overflows.
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(input.dtype, copy=False)
    return _wrap(out)


def relu(input: Tensor) -> Tensor:
    return _wrap(np.maximum(input.data, 0))


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
    if a.dtype != b.dtype:
        raise TypeError(f"{op}: dtype mismatch {a.dtype} vs {b.dtype}")


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "elementwise_mul")
    return _wrap(a.data * b.data)


def elementwise_add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "elementwise_add")
    return _wrap(a.data + b.data)


def elementwise_max(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "elementwise_max")
    return _wrap(np.maximum(a.data, b.data))


def scalar_scale(t: Tensor, s: float) -> Tensor:
    return _wrap(t.data * t.dtype.type(s))


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    if not tensors:
        raise ShapeError("concat_channels needs at least one tensor")
    for t in tensors:
        _check_4d(t, "concat_channels operand")
    n, _, h, w = tensors[0].shape
    for k, t in enumerate(tensors[1:], start=1):
        if (t.shape[0], t.shape[2], t.shape[3]) != (n, h, w):
            raise ShapeError(
                f"concat_channels: operand {k} has N,H,W {(t.shape[0],) + t.shape[2:]}, expected {(n, h, w)}"
            )
        if t.dtype != tensors[0].dtype:
            raise TypeError("concat_channels: mixed dtypes")
    return _wrap(np.concatenate([t.data for t in tensors], axis=1))


def slice_channels(t: Tensor, start: int, stop: int) -> Tensor:
    _check_4d(t, "slice_channels input")
    if not 0 <= start < stop <= t.shape[1]:
        raise ShapeError(f"channel slice [{start}:{stop}] out of range for C={t.shape[1]}")
    return _wrap(t.data[:, start:stop].copy())


def broadcast_channels(t: Tensor, channels: int) -> Tensor:
    """Repeat a single-channel map across ``channels`` channels."""
    _check_4d(t, "broadcast_channels input")
    if t.shape[1] != 1:
        raise ShapeError(f"broadcast_channels needs C=1, got C={t.shape[1]}")
    return _wrap(np.repeat(t.data, channels, axis=1))


def sum_all(t: Tensor) -> Tensor:
    return _wrap(np.array([t.data.sum(dtype=np.float64)], dtype=t.dtype))
