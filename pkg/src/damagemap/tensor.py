"""Dense numeric kernels: forward and backward passes for the layer types used
by the network, plus SGD, dropout and bilinear resizing.

Tensors are plain ``numpy.ndarray`` objects in NCHW layout. Kernels keep the
dtype of their inputs, so passing float64 arrays gives the 64-bit mode used
for gradient checking; production code runs in float32.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32
LOG_CLAMP = 1e-12


class ShapeError(ValueError):
    """Raised when tensor extents do not agree with what a kernel expects."""


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: int = 3
    stride: int = 1
    padding: int = 1

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")
        if (self.kernel, self.stride, self.padding) != (3, 1, 1):
            raise ValueError("only 3x3 / stride 1 / padding 1 convolutions are supported")


@dataclass
class GradientPair:
    value: np.ndarray
    grad: np.ndarray

    def __post_init__(self):
        if self.value.shape != self.grad.shape:
            raise ShapeError(f"value shape {self.value.shape} != grad shape {self.grad.shape}")


def _check_finite(x: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite values produced by {what}")
    return x


def _check_conv_shapes(x, weights, bias):
    if x.ndim != 4:
        raise ShapeError(f"conv input must be NCHW, got rank {x.ndim}")
    if weights.ndim != 4 or weights.shape[2:] != (3, 3):
        raise ShapeError(f"conv weights must be Ox I x3x3, got {weights.shape}")
    if x.shape[1] != weights.shape[1]:
        raise ShapeError(
            f"input channels: input has {x.shape[1]}, weights expect {weights.shape[1]}"
        )
    if bias is not None and bias.shape != (weights.shape[0],):
        raise ShapeError(f"bias length: expected {weights.shape[0]}, got {bias.shape}")
    if x.shape[2] < 1 or x.shape[3] < 1:
        raise ShapeError(f"spatial dims must be >= 1, got {x.shape[2:]}")


def _windows(x: np.ndarray) -> np.ndarray:
    """3x3 sliding windows of the zero-padded input: (N, C, H, W, 3, 3) view."""
    padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    return sliding_window_view(padded, (3, 3), axis=(2, 3))


def conv2d_forward(x, weights, bias, spec: ConvSpec | None = None) -> np.ndarray:
    _check_conv_shapes(x, weights, bias)
    if spec is not None and (spec.in_channels, spec.out_channels) != weights.shape[:2][::-1]:
        raise ShapeError(
            f"ConvSpec {spec.in_channels}->{spec.out_channels} does not match weights {weights.shape}"
        )
    out = np.tensordot(_windows(x), weights, axes=([1, 4, 5], [1, 2, 3]))  # N,H,W,O
    out += bias
    return _check_finite(np.ascontiguousarray(out.transpose(0, 3, 1, 2)), "conv2d_forward")


def conv2d_backward(x, weights, grad_out):
    """Returns ``(grad_input, grad_weights, grad_bias)``."""
    _check_conv_shapes(x, weights, None)
    expected = (x.shape[0], weights.shape[0], x.shape[2], x.shape[3])
    if grad_out.shape != expected:
        raise ShapeError(f"grad_out shape {grad_out.shape} != forward output {expected}")
    grad_w = np.tensordot(grad_out, _windows(x), axes=([0, 2, 3], [0, 2, 3]))
    grad_b = grad_out.sum(axis=(0, 2, 3))
    # full correlation of grad_out with the spatially flipped kernel
    flipped = weights[:, :, ::-1, ::-1]
    grad_x = np.tensordot(_windows(grad_out), flipped, axes=([1, 4, 5], [0, 2, 3]))
    grad_x = np.ascontiguousarray(grad_x.transpose(0, 3, 1, 2))
    return grad_x, grad_w.astype(weights.dtype, copy=False), grad_b


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0).astype(x.dtype, copy=False)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    # subgradient at exactly 0 is 0
    return np.where(x > 0, grad_out, 0).astype(grad_out.dtype, copy=False)


def maxpool2_forward(x: np.ndarray):
    """2x2 / stride 2 max pooling.

    Returns the pooled tensor and, per output cell, the index (0..3, row-major
    inside the window) of the winning input. Ties go to the lowest index.
    """
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool needs even spatial dims, got {h}x{w}")
    blocks = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, h // 2, w // 2, 4)
    argmax = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, argmax[..., None], axis=-1)[..., 0]
    return out, argmax


def maxpool2_backward(grad_out: np.ndarray, argmax: np.ndarray) -> np.ndarray:
    n, c, h2, w2 = grad_out.shape
    blocks = np.zeros((n, c, h2, w2, 4), dtype=grad_out.dtype)
    np.put_along_axis(blocks, argmax[..., None], grad_out[..., None], axis=-1)
    blocks = blocks.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return blocks.reshape(n, c, h2 * 2, w2 * 2)


def dense_forward(x, weights, bias) -> np.ndarray:
    if x.ndim != 2 or weights.ndim != 2:
        raise ShapeError(f"dense expects N x D input and D x M weights, got {x.shape}, {weights.shape}")
    if x.shape[1] != weights.shape[0]:
        raise ShapeError(f"inner dims: input has {x.shape[1]}, weights expect {weights.shape[0]}")
    if bias.shape != (weights.shape[1],):
        raise ShapeError(f"bias length: expected {weights.shape[1]}, got {bias.shape}")
    return _check_finite(x @ weights + bias, "dense_forward")


def dense_backward(x, weights, grad_out):
    """Returns ``(grad_input, grad_weights, grad_bias)``."""
    if grad_out.shape != (x.shape[0], weights.shape[1]):
        raise ShapeError(f"grad_out shape {grad_out.shape} != {(x.shape[0], weights.shape[1])}")
    return grad_out @ weights.T, x.T @ grad_out, grad_out.sum(axis=0)


def softmax(logits: np.ndarray) -> np.ndarray:
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise ShapeError(f"softmax expects N x C with C >= 2, got {logits.shape}")
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(probs: np.ndarray, onehot: np.ndarray):
    """Mean cross-entropy of a batch of probability rows.

    Returns ``(loss, grad_logits)`` where ``grad_logits`` is the gradient of the
    loss w.r.t. the pre-softmax logits, ``(probs - onehot) / N``.
    """
    if probs.shape != onehot.shape:
        raise ShapeError(f"probs {probs.shape} vs onehot {onehot.shape}")
    if not np.all(onehot.sum(axis=1) == 1) or not np.all((onehot == 0) | (onehot == 1)):
        raise ValueError("onehot rows must be valid one-hot vectors")
    n = probs.shape[0]
    true_p = np.sum(probs * onehot, axis=1)
    loss = float(-np.mean(np.log(np.maximum(true_p, LOG_CLAMP))))
    return loss, (probs - onehot) / n


def onehot(labels: Iterable[int], num_classes: int, dtype=DEFAULT_DTYPE) -> np.ndarray:
    labels = np.asarray(list(labels), dtype=np.int64)
    out = np.zeros((labels.size, num_classes), dtype=dtype)
    out[np.arange(labels.size), labels] = 1
    return out


def sgd_step(params: Iterable[GradientPair], mu: float) -> None:
    """In-place update ``value <- value - mu * grad`` for every pair."""
    if mu < 0:
        raise ValueError(f"learning rate must be non-negative, got {mu}")
    if mu == 0:
        return
    for p in params:
        p.value -= (mu * p.grad).astype(p.value.dtype, copy=False)


def dropout(x, rate: float, rng: np.random.Generator, training: bool):
    """Inverted dropout. Returns ``(output, keep_mask)``; the mask is None when
    the call is an identity (eval mode or rate 0)."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0:
        return x, None
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1 - rate)
    return x * keep, keep


def dropout_backward(grad_out, keep_mask):
    return grad_out if keep_mask is None else grad_out * keep_mask


def _axis_weights(n_in: int, n_out: int):
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


def bilinear_resize(grid: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Bilinear resize of the last two axes, half-pixel centres
    (align_corners=False), edge samples clamped."""
    if target_h < 1 or target_w < 1:
        raise ValueError(f"target size must be >= 1, got {target_h}x{target_w}")
    h, w = grid.shape[-2:]
    if h < 1 or w < 1:
        raise ShapeError(f"source grid must be non-empty, got {h}x{w}")
    dtype = grid.dtype if np.issubdtype(grid.dtype, np.floating) else np.float64
    g = grid.astype(np.float64)
    r0, r1, fy = _axis_weights(h, target_h)
    c0, c1, fx = _axis_weights(w, target_w)
    fy = fy[:, None]
    top = g[..., r0, :]
    rows = top + (g[..., r1, :] - top) * fy
    left = rows[..., c0]
    out = left + (rows[..., c1] - left) * fx
    return out.astype(dtype)
