"""Central finite-difference verification of every layer's backward pass.

All checks run in float64.  Each layer is reduced to a scalar by
contracting its output with a fixed random tensor, so the analytic
gradients come straight from the backward kernel fed that tensor.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import ops
from .seeding import substream

EPS = 1e-3
THRESHOLDS = {
    "conv3d": 1e-5,
    "maxpool3d": 1e-5,
    "relu": 1e-5,
    "dense": 1e-5,
    "flatten": 1e-5,
    "sigmoid_bce": 1e-5,
    "batchnorm": 1e-4,
}


def numerical_gradient(f: Callable[[], float], arr: np.ndarray, eps: float = EPS) -> np.ndarray:
    """d f / d arr by central differences, perturbing ``arr`` in place."""
    grad = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        up = f()
        flat[i] = old - eps
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """max |a - n| / max(|a|, |n|, floor) over all elements."""
    a, n = np.asarray(analytic, np.float64), np.asarray(numeric, np.float64)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def _compare(pairs, corrupt: bool) -> float:
    worst = 0.0
    for analytic, numeric in pairs:
        if corrupt:
            analytic = analytic * 1.01
        worst = max(worst, relative_error(analytic, numeric))
    return worst


def check_conv3d(rng: np.random.Generator, corrupt: bool = False) -> float:
    worst = 0.0
    # 2 input channels exercises the im2col kernel, 5 the per-offset kernel
    for in_ch in (2, 5):
        x = rng.standard_normal((1, 5, 5, 5, in_ch))
        w = rng.standard_normal((3, 3, 3, in_ch, 3))
        b = rng.standard_normal(3)
        r = rng.standard_normal((1, 3, 3, 3, 3))
        f = lambda: float((ops.conv3d_forward(x, w, b) * r).sum())
        gx, gw, gb = ops.conv3d_backward(x, w, r)
        worst = max(worst, _compare([(gx, numerical_gradient(f, x)),
                                     (gw, numerical_gradient(f, w)),
                                     (gb, numerical_gradient(f, b))], corrupt))
    return worst


def check_maxpool3d(rng: np.random.Generator, corrupt: bool = False) -> float:
    shape = (1, 4, 4, 4, 3)
    # distinct values 0.01 apart: no perturbation of size EPS can change an argmax
    x = (rng.permutation(int(np.prod(shape))) * 0.01).reshape(shape).astype(np.float64)
    r = rng.standard_normal((1, 2, 2, 2, 3))
    f = lambda: float((ops.maxpool3d_forward(x)[0] * r).sum())
    _, argmax = ops.maxpool3d_forward(x)
    gx = ops.maxpool3d_backward(r, argmax, x.shape)
    return _compare([(gx, numerical_gradient(f, x))], corrupt)


def check_relu(rng: np.random.Generator, corrupt: bool = False) -> float:
    u = rng.standard_normal((2, 3, 3, 3, 2))
    x = np.sign(u) * (0.02 + np.abs(u))  # keep every entry > 1e-2 away from the kink
    r = rng.standard_normal(x.shape)
    f = lambda: float((ops.relu_forward(x) * r).sum())
    return _compare([(ops.relu_backward(x, r), numerical_gradient(f, x))], corrupt)


def check_dense(rng: np.random.Generator, corrupt: bool = False) -> float:
    x = rng.standard_normal((3, 6))
    w = rng.standard_normal((6, 4))
    b = rng.standard_normal(4)
    r = rng.standard_normal((3, 4))
    f = lambda: float((ops.dense_forward(x, w, b) * r).sum())
    gx, gw, gb = ops.dense_backward(x, w, r)
    return _compare([(gx, numerical_gradient(f, x)), (gw, numerical_gradient(f, w)),
                     (gb, numerical_gradient(f, b))], corrupt)


def check_flatten(rng: np.random.Generator, corrupt: bool = False) -> float:
    x = rng.standard_normal((2, 1, 1, 1, 4))
    r = rng.standard_normal((2, 4))
    f = lambda: float((ops.flatten(x) * r).sum())
    return _compare([(ops.unflatten(r, x.shape), numerical_gradient(f, x))], corrupt)


def check_sigmoid_bce(rng: np.random.Generator, corrupt: bool = False) -> float:
    z = rng.standard_normal((4, 1)) * 3
    y = rng.integers(0, 2, size=4)
    f = lambda: ops.bce_with_logits(z, y)[0]
    _, gz = ops.bce_with_logits(z, y)
    return _compare([(gz, numerical_gradient(f, z))], corrupt)


def check_batchnorm(rng: np.random.Generator, corrupt: bool = False) -> float:
    x = rng.standard_normal((2, 3, 3, 3, 2))
    gamma = rng.standard_normal(2)
    beta = rng.standard_normal(2)
    r = rng.standard_normal(x.shape)
    f = lambda: float((ops.batchnorm_forward(x, gamma, beta)[0] * r).sum())
    _, cache = ops.batchnorm_forward(x, gamma, beta)
    gx, gg, gb = ops.batchnorm_backward(r, cache)
    return _compare([(gx, numerical_gradient(f, x)), (gg, numerical_gradient(f, gamma)),
                     (gb, numerical_gradient(f, beta))], corrupt)


CHECKS = {
    "conv3d": check_conv3d,
    "maxpool3d": check_maxpool3d,
    "relu": check_relu,
    "dense": check_dense,
    "flatten": check_flatten,
    "sigmoid_bce": check_sigmoid_bce,
    "batchnorm": check_batchnorm,
}


def run_gradcheck(seed: int = 0, corrupt: str | None = None) -> dict[str, float]:
    """Max relative error per layer kind.  ``corrupt`` names a layer whose
    analytic gradients are deliberately skewed by 1% (negative control)."""
    return {name: check(substream(seed, "gradcheck", i), corrupt == name)
            for i, (name, check) in enumerate(CHECKS.items())}


def passed(errors: dict[str, float]) -> bool:
    return all(errors[name] < THRESHOLDS[name] for name in errors)
