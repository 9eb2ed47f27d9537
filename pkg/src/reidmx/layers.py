"""Layer kernels: forward passes and hand-derived backward passes.

Kernels cover what a small embedding network needs: GEMM, standard /
depthwise / pointwise convolution, batch normalization, ReLU, average
pooling and residual addition.

Convolutions use the direct algorithm (a loop over kernel offsets with
vectorized accumulation) rather than im2col or FFT; correctness comes
first and the test suite checks them against fully naive nested loops.

Precision contract:
  * ``Precision.BINARY32``: plain float32 arithmetic.
  * ``Precision.BINARY16``: operands are quantized to binary16 before
    use and products are accumulated in binary32 (the mixed-precision
    GEMM contract).  The result is quantized only if the output tensor
    mode asks for it.
  * Batch normalization is a binary32-only kernel: handing it a binary16
    input raises :class:`PrecisionViolation`.  Mapping its inputs to
    half precision is exactly the thing that breaks training.
  * Backward passes always accumulate in binary32 and return raw float32
    gradient arrays.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .half import quantize_f16
from .tensor import Precision, PrecisionViolation, Tensor

__all__ = [
    "ConvKind",
    "ConvSpec",
    "BnParams",
    "gemm",
    "conv2d_forward",
    "conv2d_backward",
    "batchnorm_forward",
    "batchnorm_backward",
    "relu",
    "relu_backward",
    "avgpool2d",
    "avgpool2d_backward",
    "residual_add",
    "residual_add_backward",
]


class ConvKind(enum.Enum):
    STANDARD = "standard"
    DEPTHWISE = "depthwise"
    POINTWISE = "pointwise"


@dataclass(frozen=True)
class ConvSpec:
    """Shape contract for a 2-D convolution.

    Weight layouts: standard ``(out, in, k, k)``, depthwise ``(in, k, k)``
    (one k x k filter per channel), pointwise ``(out, in)``.
    """

    kind: ConvKind
    k: int
    in_channels: int
    out_channels: int
    stride: int = 1
    padding: int = 0

    def __post_init__(self) -> None:
        if self.k < 1 or self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("conv dimensions must be positive")
        if self.stride < 1 or self.padding < 0:
            raise ValueError("bad stride/padding")
        if self.kind is ConvKind.POINTWISE and self.k != 1:
            raise ValueError("pointwise convolution requires k == 1")
        if self.kind is ConvKind.DEPTHWISE and self.out_channels != self.in_channels:
            raise ValueError("depthwise convolution maps each channel to itself")

    def weight_shape(self) -> tuple:
        if self.kind is ConvKind.STANDARD:
            return (self.out_channels, self.in_channels, self.k, self.k)
        if self.kind is ConvKind.DEPTHWISE:
            return (self.in_channels, self.k, self.k)
        return (self.out_channels, self.in_channels)

    def out_size(self, h: int, w: int) -> tuple:
        oh = (h + 2 * self.padding - self.k) // self.stride + 1
        ow = (w + 2 * self.padding - self.k) // self.stride + 1
        if oh < 1 or ow < 1:
            raise ValueError(f"kernel {self.k} does not fit input {h}x{w}")
        return oh, ow


@dataclass
class BnParams:
    """Per-channel batch-norm state: two trained vectors, two running."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5

    def __post_init__(self) -> None:
        self.gamma = np.asarray(self.gamma, dtype=np.float32)
        self.beta = np.asarray(self.beta, dtype=np.float32)
        self.running_mean = np.asarray(self.running_mean, dtype=np.float32)
        self.running_var = np.asarray(self.running_var, dtype=np.float32)
        c = self.gamma.shape
        if not (self.beta.shape == self.running_mean.shape == self.running_var.shape == c):
            raise ValueError("batch-norm vectors must share one channel shape")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if np.any(self.running_var < 0):
            raise ValueError("running variance must be non-negative")


def _as_mode(a: np.ndarray, mode: Precision) -> np.ndarray:
    return quantize_f16(a) if mode is Precision.BINARY16 else a


def gemm(a: Tensor, b: Tensor, mode: Precision, out_mode: Precision | None = None) -> Tensor:
    """Matrix product ``a @ b``.

    In binary16 mode both operands are quantized first and the products
    accumulate in binary32; the result is rounded per ``out_mode``
    (defaults to ``mode``).
    """
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"gemm shape mismatch: {a.shape} @ {b.shape}")
    out_mode = mode if out_mode is None else out_mode
    res = _as_mode(a.data, mode) @ _as_mode(b.data, mode)
    return Tensor(res, out_mode)


def _check_conv_inputs(x: Tensor, w: Tensor, spec: ConvSpec) -> None:
    if x.ndim != 4:
        raise ValueError(f"conv input must be (n, c, h, w), got {x.shape}")
    if x.shape[1] != spec.in_channels:
        raise ValueError(f"input has {x.shape[1]} channels, spec wants {spec.in_channels}")
    if w.shape != spec.weight_shape():
        raise ValueError(f"weight shape {w.shape} != {spec.weight_shape()} for {spec.kind.value}")


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d_forward(x: Tensor, w: Tensor, spec: ConvSpec, mode: Precision,
                   out_mode: Precision | None = None) -> Tensor:
    """Direct 2-D convolution (cross-correlation, zero padding)."""
    _check_conv_inputs(x, w, spec)
    out_mode = mode if out_mode is None else out_mode
    xd = _as_mode(x.data, mode)
    wd = _as_mode(w.data, mode)
    n, _, h, wid = xd.shape
    oh, ow = spec.out_size(h, wid)
    s = spec.stride

    if spec.kind is ConvKind.POINTWISE:
        out = np.einsum("bmhw,nm->bnhw", xd[:, :, ::s, ::s][:, :, :oh, :ow], wd)
        return Tensor(out, out_mode)

    xp = _pad(xd, spec.padding)
    out = np.zeros((n, spec.out_channels, oh, ow), dtype=np.float32)
    for i in range(spec.k):
        for j in range(spec.k):
            patch = xp[:, :, i:i + oh * s:s, j:j + ow * s:s]
            if spec.kind is ConvKind.STANDARD:
                out += np.einsum("bmhw,nm->bnhw", patch, wd[:, :, i, j])
            else:  # depthwise
                out += patch * wd[:, i, j][None, :, None, None]
    return Tensor(out, out_mode)


def conv2d_backward(x: Tensor, w: Tensor, grad_out: np.ndarray, spec: ConvSpec,
                    mode: Precision) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of ``conv2d_forward`` w.r.t. input and weights.

    In binary16 mode the incoming gradient and both operands are taken
    through binary16 (gradients flow at working precision), while the
    accumulation itself stays in binary32.  Returns float32 arrays.
    """
    _check_conv_inputs(x, w, spec)
    xd = _as_mode(x.data, mode)
    wd = _as_mode(w.data, mode)
    g = _as_mode(np.asarray(grad_out, dtype=np.float32), mode)
    n, _, h, wid = xd.shape
    oh, ow = spec.out_size(h, wid)
    if g.shape != (n, spec.out_channels, oh, ow):
        raise ValueError(f"grad_out shape {g.shape} != {(n, spec.out_channels, oh, ow)}")
    s = spec.stride

    if spec.kind is ConvKind.POINTWISE:
        taps = xd[:, :, ::s, ::s][:, :, :oh, :ow]
        grad_w = np.einsum("bnhw,bmhw->nm", g, taps)
        grad_x = np.zeros_like(xd)
        grad_x[:, :, ::s, ::s][:, :, :oh, :ow] = np.einsum("bnhw,nm->bmhw", g, wd)
        return grad_x, grad_w.astype(np.float32, copy=False)

    xp = _pad(xd, spec.padding)
    grad_xp = np.zeros_like(xp)
    grad_w = np.zeros_like(wd)
    for i in range(spec.k):
        for j in range(spec.k):
            patch = xp[:, :, i:i + oh * s:s, j:j + ow * s:s]
            window = grad_xp[:, :, i:i + oh * s:s, j:j + ow * s:s]
            if spec.kind is ConvKind.STANDARD:
                grad_w[:, :, i, j] = np.einsum("bnhw,bmhw->nm", g, patch)
                window += np.einsum("bnhw,nm->bmhw", g, wd[:, :, i, j])
            else:
                grad_w[:, i, j] = np.einsum("bchw,bchw->c", g, patch)
                window += g * wd[:, i, j][None, :, None, None]
    p = spec.padding
    grad_x = grad_xp[:, :, p:p + h, p:p + wid] if p else grad_xp
    return np.ascontiguousarray(grad_x), grad_w


def _bn_axes(x: np.ndarray) -> tuple:
    if x.ndim == 2:
        return (0,)
    if x.ndim == 4:
        return (0, 2, 3)
    raise ValueError(f"batch norm expects (n, c) or (n, c, h, w), got {x.shape}")


def _per_channel(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape(1, -1) if ndim == 2 else v.reshape(1, -1, 1, 1)


def batchnorm_forward(x: Tensor, p: BnParams, training: bool,
                      momentum: float = 0.9) -> Tensor:
    """Channel-wise batch normalization, binary32 only.

    Training mode normalizes by biased batch statistics and updates the
    running vectors in place (``new = momentum * old + (1 - momentum) *
    batch``); inference mode uses the running vectors.
    """
    if x.mode is Precision.BINARY16:
        raise PrecisionViolation(
            "batch normalization requires a binary32 input tensor; "
            "binary16 inputs destabilize the statistics and are rejected"
        )
    xd = x.data
    axes = _bn_axes(xd)
    if xd.shape[1] != p.gamma.shape[0]:
        raise ValueError(f"input has {xd.shape[1]} channels, params have {p.gamma.shape[0]}")
    if training:
        mean = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        m = np.float32(momentum)
        p.running_mean[...] = m * p.running_mean + (np.float32(1.0) - m) * mean
        p.running_var[...] = m * p.running_var + (np.float32(1.0) - m) * var
    else:
        mean = p.running_mean
        var = p.running_var
    inv = (1.0 / np.sqrt(var + np.float32(p.eps))).astype(np.float32)
    xhat = (xd - _per_channel(mean, xd.ndim)) * _per_channel(inv, xd.ndim)
    y = _per_channel(p.gamma, xd.ndim) * xhat + _per_channel(p.beta, xd.ndim)
    return Tensor(y, Precision.BINARY32)


def batchnorm_backward(x: Tensor, p: BnParams, grad_out: np.ndarray
                       ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of training-mode batch norm w.r.t. input, gamma, beta.

    Batch statistics are recomputed from ``x``; the running vectors play
    no role in the training-mode forward and therefore none here.
    """
    if x.mode is Precision.BINARY16:
        raise PrecisionViolation("batch normalization backward requires binary32 input")
    xd = x.data
    axes = _bn_axes(xd)
    g = np.asarray(grad_out, dtype=np.float32)
    if g.shape != xd.shape:
        raise ValueError(f"grad_out shape {g.shape} != input shape {xd.shape}")
    count = xd.size // xd.shape[1]
    mean = xd.mean(axis=axes)
    var = xd.var(axis=axes)
    inv = (1.0 / np.sqrt(var + np.float32(p.eps))).astype(np.float32)
    xhat = (xd - _per_channel(mean, xd.ndim)) * _per_channel(inv, xd.ndim)

    grad_beta = g.sum(axis=axes)
    grad_gamma = (g * xhat).sum(axis=axes)
    # d/dx of gamma * (x - mu) / sigma with batch statistics:
    gx = (g * np.float32(count)
          - _per_channel(grad_beta, xd.ndim)
          - xhat * _per_channel(grad_gamma, xd.ndim))
    gx *= _per_channel(p.gamma * inv / np.float32(count), xd.ndim)
    return (gx.astype(np.float32, copy=False),
            grad_gamma.astype(np.float32, copy=False),
            grad_beta.astype(np.float32, copy=False))


def relu(x: Tensor) -> Tensor:
    """Elementwise max(x, 0); preserves the input's mode tag."""
    return Tensor(np.maximum(x.data, np.float32(0.0)), x.mode)


def relu_backward(x: Tensor, grad_out: np.ndarray) -> np.ndarray:
    g = np.asarray(grad_out, dtype=np.float32)
    if g.shape != x.shape:
        raise ValueError(f"grad_out shape {g.shape} != input shape {x.shape}")
    return np.where(x.data > 0, g, np.float32(0.0))


def avgpool2d(x: Tensor, kh: int, kw: int) -> Tensor:
    """Non-overlapping average pooling; kernel must tile the input."""
    if x.ndim != 4:
        raise ValueError(f"avgpool expects (n, c, h, w), got {x.shape}")
    n, c, h, w = x.shape
    if kh < 1 or kw < 1 or h % kh or w % kw:
        raise ValueError(f"pool {kh}x{kw} does not tile input {h}x{w}")
    pooled = x.data.reshape(n, c, h // kh, kh, w // kw, kw).mean(axis=(3, 5))
    return Tensor(pooled, x.mode)


def avgpool2d_backward(x: Tensor, kh: int, kw: int, grad_out: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    g = np.asarray(grad_out, dtype=np.float32)
    if g.shape != (n, c, h // kh, w // kw):
        raise ValueError(f"grad_out shape {g.shape} != {(n, c, h // kh, w // kw)}")
    scale = np.float32(1.0 / (kh * kw))
    return np.repeat(np.repeat(g * scale, kh, axis=2), kw, axis=3)


def residual_add(x: Tensor, fx: Tensor) -> Tensor:
    """Skip connection x + f(x); binary32 wins if the modes differ."""
    if x.shape != fx.shape:
        raise ValueError(f"residual shapes differ: {x.shape} vs {fx.shape}")
    mode = x.mode if x.mode is fx.mode else Precision.BINARY32
    return Tensor(x.data + fx.data, mode)


def residual_add_backward(grad_out: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    g = np.asarray(grad_out, dtype=np.float32)
    return g, g.copy()
