"""Dense tensor kernels with exact backward passes.

Tensors are plain numpy arrays. Image tensors use the (batch, channels,
height, width) layout. Every op works in the dtype of its inputs, so the same
code runs in float32 for training and float64 for gradient checks.

Convolution is cross-correlation (no kernel flip). Internally it is lowered to
a sliding-window view contracted against the filter bank, i.e. im2col without
an explicit column buffer; ``conv2d_reference`` in the tests is the nested-loop
definition it must agree with.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError

ACTIVATIONS = ("tanh", "relu")


@dataclass(frozen=True)
class ConvSpec:
    kernel_h: int
    kernel_w: int
    in_channels: int
    out_channels: int
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        for name in ("kernel_h", "kernel_w", "in_channels", "out_channels", "stride"):
            if getattr(self, name) < 1:
                raise ShapeError(f"{name} must be positive, got {getattr(self, name)}")
        if self.padding < 0:
            raise ShapeError(f"padding must be non-negative, got {self.padding}")

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        oh = (h + 2 * self.padding - self.kernel_h) // self.stride + 1
        ow = (w + 2 * self.padding - self.kernel_w) // self.stride + 1
        if h + 2 * self.padding < self.kernel_h:
            raise ShapeError(f"height {h} (padding {self.padding}) smaller than kernel {self.kernel_h}")
        if w + 2 * self.padding < self.kernel_w:
            raise ShapeError(f"width {w} (padding {self.padding}) smaller than kernel {self.kernel_w}")
        return oh, ow


def _check_conv_shapes(x, filters, bias, spec):
    if x.ndim != 4:
        raise ShapeError(f"input must be 4-D (N, C, H, W), got shape {x.shape}")
    if filters.shape != (spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w):
        raise ShapeError(
            f"filters shape {filters.shape} does not match spec "
            f"{(spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w)}"
        )
    if x.shape[1] != spec.in_channels:
        raise ShapeError(f"input channels: got {x.shape[1]}, spec expects {spec.in_channels}")
    if bias is not None and bias.shape != (spec.out_channels,):
        raise ShapeError(f"bias shape {bias.shape} does not match out_channels {spec.out_channels}")


def _pad(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _windows(xp, spec, oh, ow):
    # (N, C, OH, OW, kh, kw) view; no copy until the contraction
    win = sliding_window_view(xp, (spec.kernel_h, spec.kernel_w), axis=(2, 3))
    s = spec.stride
    return win[:, :, : (oh - 1) * s + 1 : s, : (ow - 1) * s + 1 : s]


def conv2d_forward(x: np.ndarray, filters: np.ndarray, bias: np.ndarray | None, spec: ConvSpec) -> np.ndarray:
    """Cross-correlate ``x`` (N, Cin, H, W) with ``filters`` (Cout, Cin, kh, kw) and add ``bias``."""
    _check_conv_shapes(x, filters, bias, spec)
    oh, ow = spec.output_hw(x.shape[2], x.shape[3])
    win = _windows(_pad(x, spec.padding), spec, oh, ow)
    out = np.tensordot(win, filters, axes=([1, 4, 5], [1, 2, 3]))  # N, OH, OW, Cout
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    if bias is not None:
        out += bias[None, :, None, None]
    return out


def conv2d_backward(grad_out, x, filters, spec: ConvSpec, with_bias: bool = True, need_input_grad: bool = True):
    """Return ``(grad_input, grad_filters, grad_bias)``.

    ``grad_bias`` is None when ``with_bias`` is false and ``grad_input`` is None
    when ``need_input_grad`` is false (first layer of a network).
    """
    _check_conv_shapes(x, filters, None, spec)
    n, _, h, w = x.shape
    oh, ow = spec.output_hw(h, w)
    if grad_out.shape != (n, spec.out_channels, oh, ow):
        raise ShapeError(f"grad_out shape {grad_out.shape} != forward output shape {(n, spec.out_channels, oh, ow)}")
    p, s = spec.padding, spec.stride
    xp = _pad(x, p)
    win = _windows(xp, spec, oh, ow)
    grad_filters = np.tensordot(grad_out, win, axes=([0, 2, 3], [0, 2, 3]))
    grad_bias = grad_out.sum(axis=(0, 2, 3)) if with_bias else None
    if not need_input_grad:
        return None, grad_filters, grad_bias

    gxp = np.zeros_like(xp)
    for i in range(spec.kernel_h):
        for j in range(spec.kernel_w):
            # contribution of tap (i, j) to every input position it touched
            contrib = np.tensordot(grad_out, filters[:, :, i, j], axes=([1], [0]))  # N, OH, OW, Cin
            gxp[:, :, i : i + s * (oh - 1) + 1 : s, j : j + s * (ow - 1) + 1 : s] += contrib.transpose(0, 3, 1, 2)
    grad_input = gxp[:, :, p : p + h, p : p + w] if p else gxp
    return np.ascontiguousarray(grad_input), grad_filters, grad_bias


def maxpool_forward(x: np.ndarray, window: int, stride: int):
    """Max-pool each channel; returns ``(output, argmax)``.

    ``argmax`` holds, for every output cell, the flat index into the H*W plane
    of the winning input. Ties go to the lowest linear index.
    """
    if window < 1 or stride < 1:
        raise ShapeError(f"pool window and stride must be positive, got {window}, {stride}")
    if x.ndim != 4:
        raise ShapeError(f"input must be 4-D (N, C, H, W), got shape {x.shape}")
    n, c, h, w = x.shape
    if window > h or window > w:
        raise ShapeError(f"pool window {window} larger than input plane {h}x{w}")
    oh = (h - window) // stride + 1
    ow = (w - window) // stride + 1
    win = sliding_window_view(x, (window, window), axis=(2, 3))
    win = win[:, :, : (oh - 1) * stride + 1 : stride, : (ow - 1) * stride + 1 : stride]
    flat = win.reshape(n, c, oh, ow, window * window)
    local = flat.argmax(axis=-1)  # first occurrence == lowest row-major position
    out = np.take_along_axis(flat, local[..., None], axis=-1)[..., 0]
    di, dj = np.divmod(local, window)
    rows = np.arange(oh)[:, None] * stride + di
    cols = np.arange(ow)[None, :] * stride + dj
    return np.ascontiguousarray(out), rows * w + cols


def maxpool_backward(grad_out: np.ndarray, argmax: np.ndarray, input_shape) -> np.ndarray:
    if grad_out.shape != argmax.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} != argmax shape {argmax.shape}")
    n, c, h, w = input_shape
    plane = h * w
    offsets = (np.arange(n * c) * plane).reshape(n, c, 1, 1)
    flat = np.bincount((argmax + offsets).ravel(), weights=grad_out.ravel(), minlength=n * c * plane)
    return flat.reshape(input_shape).astype(grad_out.dtype, copy=False)


def dense_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    if x.ndim != 2:
        raise ShapeError(f"dense input must be 2-D (N, D), got shape {x.shape}")
    if weights.ndim != 2 or weights.shape[0] != x.shape[1]:
        raise ShapeError(f"input features {x.shape[1]} do not match weights rows {weights.shape}")
    if bias.shape != (weights.shape[1],):
        raise ShapeError(f"bias shape {bias.shape} does not match output features {weights.shape[1]}")
    return x @ weights + bias


def dense_backward(grad_out, x, weights):
    """Return ``(grad_input, grad_weights, grad_bias)``."""
    if grad_out.shape != (x.shape[0], weights.shape[1]):
        raise ShapeError(f"grad_out shape {grad_out.shape} != {(x.shape[0], weights.shape[1])}")
    return grad_out @ weights.T, x.T @ grad_out, grad_out.sum(axis=0)


def _check_kind(kind):
    if kind not in ACTIVATIONS:
        raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def activation_forward(kind: str, x: np.ndarray) -> np.ndarray:
    _check_kind(kind)
    if kind == "tanh":
        return np.tanh(x)
    return np.maximum(x, 0)


def activation_backward(kind: str, x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    _check_kind(kind)
    if kind == "tanh":
        t = np.tanh(x)
        return grad_out * (1 - t * t)
    return grad_out * (x > 0)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels):
    """Mean cross-entropy over the batch.

    Returns ``(loss, grad_logits, probs)`` with ``grad_logits = (probs - onehot) / N``.
    """
    if logits.ndim != 2:
        raise ShapeError(f"logits must be 2-D (N, C), got shape {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch size {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    log_probs = z - lse[:, None]
    probs = np.exp(log_probs)
    rows = np.arange(n)
    loss = float(-log_probs[rows, labels].mean())
    grad = probs.copy()
    grad[rows, labels] -= 1
    grad /= n
    return loss, grad, probs
