"""Forward and backward kernels for the volumetric layers.

Activations are channels-last, batch-major: ``(batch, depth, height, width,
channels)`` with depth/height/width corresponding to z/y/x.  Every kernel
works in the dtype of its inputs, so float64 arrays give a float64 engine
(used for gradient verification) and float32 arrays the training engine.
Reductions run in a fixed order; results are bit-reproducible.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DegenerateBatch, ShapeMismatch

# Below this many im2col columns a single big GEMM beats per-offset accumulation.
_IM2COL_MAX_COLUMNS = 128


def glorot_limit(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))


def glorot_uniform(fan_in: int, fan_out: int, shape, rng: np.random.Generator,
                   dtype=np.float32) -> np.ndarray:
    """Draw i.i.d. weights from U[-L, L] with L = sqrt(6 / (fan_in + fan_out))."""
    if fan_in < 1 or fan_out < 1:
        raise ValueError("fan_in and fan_out must be positive")
    limit = glorot_limit(fan_in, fan_out)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def conv_fans(kernel: int, in_ch: int, out_ch: int) -> tuple[int, int]:
    k3 = kernel ** 3
    return k3 * in_ch, k3 * out_ch


# --------------------------------------------------------------------------
# Convolution (valid padding, stride 1)
# --------------------------------------------------------------------------

def _conv_shapes(x: np.ndarray, w: np.ndarray):
    if x.ndim != 5 or w.ndim != 5:
        raise ShapeMismatch(f"conv3d expects 5-D input and weights, got {x.shape} and {w.shape}")
    k = w.shape[0]
    if w.shape[:3] != (k, k, k):
        raise ShapeMismatch(f"kernel must be cubic, got {w.shape[:3]}")
    if x.shape[-1] != w.shape[3]:
        raise ShapeMismatch(f"input has {x.shape[-1]} channels, kernel expects {w.shape[3]}")
    if any(s < k for s in x.shape[1:4]):
        raise ShapeMismatch(f"spatial dims {x.shape[1:4]} smaller than kernel {k}")
    out_sp = tuple(s - k + 1 for s in x.shape[1:4])
    return k, out_sp


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    windows = sliding_window_view(x, (k, k, k), axis=(1, 2, 3))
    # (B, D', H', W', C, kd, kh, kw) -> (B, D', H', W', kd, kh, kw, C)
    windows = windows.transpose(0, 1, 2, 3, 5, 6, 7, 4)
    return windows.reshape(-1, k * k * k * x.shape[-1])


def _offsets(k: int):
    for i in range(k):
        for j in range(k):
            for l in range(k):
                yield i, j, l


def conv3d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Valid 3-D cross-correlation: ``out = bias + sum_{window, in_ch} x * w``.

    ``w`` has shape ``(k, k, k, in_ch, out_ch)``.
    """
    k, (do, ho, wo) = _conv_shapes(x, w)
    batch, in_ch, out_ch = x.shape[0], x.shape[-1], w.shape[-1]
    if b.shape != (out_ch,):
        raise ShapeMismatch(f"bias shape {b.shape}, expected ({out_ch},)")

    if k ** 3 * in_ch <= _IM2COL_MAX_COLUMNS:
        out = _im2col(x, k) @ w.reshape(-1, out_ch)
        out = out.reshape(batch, do, ho, wo, out_ch)
    else:
        out = np.zeros((batch, do, ho, wo, out_ch), dtype=np.result_type(x, w))
        for i, j, l in _offsets(k):
            out += x[:, i:i + do, j:j + ho, l:l + wo, :] @ w[i, j, l]
    out += b
    return out


def conv3d_backward(x: np.ndarray, w: np.ndarray, grad_out: np.ndarray,
                    need_input_grad: bool = True):
    """Gradients of :func:`conv3d_forward` with respect to input, weights and bias.

    Returns ``(grad_x, grad_w, grad_b)``; ``grad_x`` is ``None`` when
    ``need_input_grad`` is false (first layer of a network).
    """
    k, out_sp = _conv_shapes(x, w)
    batch, in_ch, out_ch = x.shape[0], x.shape[-1], w.shape[-1]
    expected = (batch, *out_sp, out_ch)
    if grad_out.shape != expected:
        raise ShapeMismatch(f"upstream gradient shape {grad_out.shape}, expected {expected}")
    do, ho, wo = out_sp

    grad_b = grad_out.sum(axis=(0, 1, 2, 3))
    g2 = grad_out.reshape(-1, out_ch)
    if k ** 3 * in_ch <= _IM2COL_MAX_COLUMNS:
        grad_w = (_im2col(x, k).T @ g2).reshape(w.shape)
    else:
        grad_w = np.empty_like(w)
        for i, j, l in _offsets(k):
            xs = np.ascontiguousarray(x[:, i:i + do, j:j + ho, l:l + wo, :]).reshape(-1, in_ch)
            grad_w[i, j, l] = xs.T @ g2

    grad_x = None
    if need_input_grad:
        # full convolution: correlate the zero-padded gradient with the flipped kernel
        pad = k - 1
        padded = np.pad(grad_out, ((0, 0), (pad, pad), (pad, pad), (pad, pad), (0, 0)))
        flipped = np.ascontiguousarray(w[::-1, ::-1, ::-1].transpose(0, 1, 2, 4, 3))
        grad_x = conv3d_forward(padded, flipped, np.zeros(in_ch, dtype=w.dtype))
    return grad_x, grad_w, grad_b


# --------------------------------------------------------------------------
# Max pooling (disjoint cubic blocks)
# --------------------------------------------------------------------------

def _pool_blocks(x: np.ndarray, pool: int) -> np.ndarray:
    b, d, h, w, c = x.shape
    if d % pool or h % pool or w % pool:
        raise ShapeMismatch(f"spatial dims {x.shape[1:4]} not divisible by pool size {pool}")
    blocks = x.reshape(b, d // pool, pool, h // pool, pool, w // pool, pool, c)
    # within-block order (dz, dy, dx): x varies fastest
    blocks = blocks.transpose(0, 1, 3, 5, 7, 2, 4, 6)
    return blocks.reshape(b, d // pool, h // pool, w // pool, c, pool ** 3)


def maxpool3d_forward(x: np.ndarray, pool: int = 2):
    """Max over disjoint ``pool**3`` blocks; returns ``(out, argmax)``.

    Ties resolve to the first block element in x-fastest order.
    """
    if x.ndim != 5:
        raise ShapeMismatch(f"maxpool3d expects 5-D input, got {x.shape}")
    blocks = _pool_blocks(x, pool)
    argmax = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, argmax[..., None], axis=-1)[..., 0]
    return out, argmax


def maxpool3d_backward(grad_out: np.ndarray, argmax: np.ndarray, x_shape, pool: int = 2):
    b, d, h, w, c = x_shape
    if grad_out.shape != argmax.shape:
        raise ShapeMismatch(f"upstream gradient shape {grad_out.shape}, expected {argmax.shape}")
    blocks = np.zeros((*grad_out.shape, pool ** 3), dtype=grad_out.dtype)
    np.put_along_axis(blocks, argmax[..., None], grad_out[..., None], axis=-1)
    blocks = blocks.reshape(b, d // pool, h // pool, w // pool, c, pool, pool, pool)
    return blocks.transpose(0, 1, 5, 2, 6, 3, 7, 4).reshape(x_shape)


# --------------------------------------------------------------------------
# Pointwise, dense and reshaping
# --------------------------------------------------------------------------

def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    # subgradient at exactly 0 is taken as 0
    return np.where(x > 0, grad_out, 0).astype(grad_out.dtype, copy=False)


def dense_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeMismatch(f"dense: input {x.shape}, weights {w.shape}, bias {b.shape}")
    return x @ w + b


def dense_backward(x: np.ndarray, w: np.ndarray, grad_out: np.ndarray):
    if grad_out.shape != (x.shape[0], w.shape[1]):
        raise ShapeMismatch(f"upstream gradient shape {grad_out.shape}")
    return grad_out @ w.T, x.T @ grad_out, grad_out.sum(axis=0)


def flatten(x: np.ndarray) -> np.ndarray:
    return x.reshape(x.shape[0], -1)


def unflatten(grad: np.ndarray, shape) -> np.ndarray:
    return grad.reshape(shape)


# --------------------------------------------------------------------------
# Sigmoid and binary cross-entropy
# --------------------------------------------------------------------------

def sigmoid(z):
    z = np.asarray(z)
    ez = np.exp(-np.abs(z))
    return np.where(z >= 0, 1 / (1 + ez), ez / (1 + ez))


def bce_with_logits(logits: np.ndarray, targets: np.ndarray):
    """Mean binary cross-entropy on logits and its gradient with respect to them.

    Uses ``max(z, 0) - z*y + log1p(exp(-|z|))``, which never takes the log
    of zero.  The loss is accumulated in float64 and returned as a float.
    """
    z = np.asarray(logits)
    y = np.asarray(targets, dtype=z.dtype).reshape(z.shape)
    if not np.isin(y, (0, 1)).all():
        raise ValueError("targets must be 0 or 1")
    n = z.shape[0]
    z64 = z.astype(np.float64)
    y64 = y.astype(np.float64)
    per_sample = np.maximum(z64, 0) - z64 * y64 + np.log1p(np.exp(-np.abs(z64)))
    loss = float(per_sample.sum() / n)
    grad = ((sigmoid(z) - y) / n).astype(z.dtype, copy=False)
    return loss, grad


def bce_loss(p, y, eps: float = 1e-12) -> float:
    """Mean cross-entropy of probabilities ``p`` against labels ``y`` (reporting only)."""
    p = np.clip(np.asarray(p, dtype=np.float64), eps, 1 - eps)
    y = np.asarray(y, dtype=np.float64).reshape(p.shape)
    return float(np.mean(-(y * np.log(p) + (1 - y) * np.log1p(-p))))


# --------------------------------------------------------------------------
# Batch normalisation (channels-last)
# --------------------------------------------------------------------------

def batchnorm_forward(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
                      running_mean: np.ndarray | None = None,
                      running_var: np.ndarray | None = None,
                      training: bool = True, eps: float = 1e-5, momentum: float = 0.99):
    """Per-channel standardisation over every axis but the last.

    In training mode the batch moments are used and, when given, the
    running moments are updated in place.  Returns ``(out, cache)``.
    """
    axes = tuple(range(x.ndim - 1))
    count = x.size // x.shape[-1]
    if training:
        if count < 2:
            raise DegenerateBatch(f"batch norm needs >= 2 values per channel, got {count}")
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        if running_mean is not None:
            running_mean *= momentum
            running_mean += (1 - momentum) * mean
            running_var *= momentum
            running_var += (1 - momentum) * var
    else:
        mean, var = running_mean, running_var
    inv_std = 1 / np.sqrt(var + eps)
    xhat = (x - mean) * inv_std
    out = gamma * xhat + beta
    return out, (xhat, inv_std, gamma, count)


def batchnorm_backward(grad_out: np.ndarray, cache):
    xhat, inv_std, gamma, count = cache
    axes = tuple(range(grad_out.ndim - 1))
    grad_beta = grad_out.sum(axis=axes)
    grad_gamma = (grad_out * xhat).sum(axis=axes)
    grad_x = (gamma * inv_std / count) * (count * grad_out - grad_beta - xhat * grad_gamma)
    return grad_x, grad_gamma, grad_beta
