"""Network description, layer objects and the assembled classifier.

The canonical network is a stack of valid 3x3x3 convolutions with ReLU,
2x2x2 max pooling, a flatten and two dense layers ending in a single logit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from . import ops
from .errors import ShapeIncompatible, ShapeMismatch
from .seeding import substream


@dataclass(frozen=True)
class ConvSpec:
    in_ch: int
    out_ch: int
    kernel: int = 3

    @property
    def n_params(self) -> int:
        return self.kernel ** 3 * self.in_ch * self.out_ch + self.out_ch


@dataclass(frozen=True)
class PoolSpec:
    size: int = 2
    n_params = 0


@dataclass(frozen=True)
class FlattenSpec:
    n_params = 0


@dataclass(frozen=True)
class DenseSpec:
    in_features: int
    out_features: int

    @property
    def n_params(self) -> int:
        return self.in_features * self.out_features + self.out_features


LayerSpec = Union[ConvSpec, PoolSpec, FlattenSpec, DenseSpec]


@dataclass(frozen=True)
class NetworkSpec:
    """Ordered layer list.  Every convolution and every dense layer but the
    last is followed by ReLU; the final dense output is a logit whose
    sigmoid is the malignancy probability.  ``batchnorm`` inserts batch
    normalisation between each convolution and its ReLU."""

    layers: tuple[LayerSpec, ...]
    input_edge: int = 48
    input_channels: int = 1
    batchnorm: bool = False

    def summary(self) -> list[tuple[str, str, tuple, int]]:
        """Rows of ``(name, type, output_shape, n_params)``; raises on illegal stacks."""
        shape: tuple = (self.input_edge,) * 3 + (self.input_channels,)
        counters: dict[str, int] = {}
        rows = []

        def name(kind):
            counters[kind] = counters.get(kind, 0) + 1
            return f"{kind}{counters[kind]}"

        if not self.layers or not isinstance(self.layers[-1], DenseSpec) \
                or self.layers[-1].out_features != 1:
            raise ShapeIncompatible("network must end in a dense layer with one output")
        for layer in self.layers:
            if isinstance(layer, ConvSpec):
                if len(shape) != 4 or shape[-1] != layer.in_ch:
                    raise ShapeIncompatible(f"conv expects {layer.in_ch} channels, got shape {shape}")
                if any(s < layer.kernel for s in shape[:3]):
                    raise ShapeIncompatible(f"spatial shape {shape[:3]} smaller than kernel")
                shape = tuple(s - layer.kernel + 1 for s in shape[:3]) + (layer.out_ch,)
                rows.append((name("conv3d"), "Conv3D", shape, layer.n_params))
                if self.batchnorm:
                    rows.append((name("batch_normalization"), "BatchNormalization", shape,
                                 2 * layer.out_ch))
            elif isinstance(layer, PoolSpec):
                if len(shape) != 4 or any(s % layer.size for s in shape[:3]):
                    raise ShapeIncompatible(f"cannot pool shape {shape} by {layer.size}")
                shape = tuple(s // layer.size for s in shape[:3]) + (shape[3],)
                rows.append((name("max_pooling3d"), "MaxPooling3D", shape, 0))
            elif isinstance(layer, FlattenSpec):
                shape = (int(np.prod(shape)),)
                rows.append((name("flatten"), "Flatten", shape, 0))
            elif isinstance(layer, DenseSpec):
                if len(shape) != 1 or shape[0] != layer.in_features:
                    raise ShapeIncompatible(f"dense expects {layer.in_features} features, got {shape}")
                shape = (layer.out_features,)
                rows.append((name("dense"), "Dense", shape, layer.n_params))
            else:
                raise ShapeIncompatible(f"unknown layer {layer!r}")
        return rows

    @property
    def n_params(self) -> int:
        return sum(r[3] for r in self.summary())


def canonical_spec(width: float = 1.0, batchnorm: bool = False, input_edge: int = 48) -> NetworkSpec:
    """The eight-convolution classifier; ``width`` scales every channel count."""
    c = [max(1, int(round(n * width))) for n in (32, 64, 128, 256)]
    layers = (
        ConvSpec(1, c[0]), ConvSpec(c[0], c[0]), PoolSpec(2),
        ConvSpec(c[0], c[1]), ConvSpec(c[1], c[1]), PoolSpec(2),
        ConvSpec(c[1], c[2]), ConvSpec(c[2], c[2]),
        ConvSpec(c[2], c[3]), ConvSpec(c[3], c[3]),
        FlattenSpec(),
        DenseSpec(c[3], c[3]), DenseSpec(c[3], 1),
    )
    return NetworkSpec(layers, input_edge=input_edge, batchnorm=batchnorm)


def small_spec() -> NetworkSpec:
    """Quarter-width canonical network for slow machines."""
    return canonical_spec(width=0.25)


def format_summary(spec: NetworkSpec, csv: bool = False) -> str:
    rows = spec.summary()
    total = sum(r[3] for r in rows)
    if csv:
        lines = ["layer,type,output_shape,params"]
        for name, kind, shape, n in rows:
            lines.append(f"{name},{kind},\"{_shape_str(shape)}\",{n}")
        lines.append(f"total,,,{total}")
        return "\n".join(lines) + "\n"
    lines = [f"{'Layer (type)':<40}{'Output Shape':<28}{'Param #':>10}", "=" * 78]
    for name, kind, shape, n in rows:
        lines.append(f"{name + ' (' + kind + ')':<40}{_shape_str(shape):<28}{n:>10}")
    lines += ["=" * 78, f"Total trainable parameters: {total:,}"]
    return "\n".join(lines) + "\n"


def _shape_str(shape) -> str:
    return "(None, " + ", ".join(str(s) for s in shape) + ")"


# --------------------------------------------------------------------------
# Layers
# --------------------------------------------------------------------------

class Layer:
    params: list[np.ndarray] = []
    buffers: list[np.ndarray] = []

    def __init__(self):
        self.params = []
        self.grads = []
        self.buffers = []

    def forward(self, x, training=False):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError


class Conv3D(Layer):
    def __init__(self, w, b, first=False):
        super().__init__()
        self.params = [w, b]
        self.first = first
        self._x = None

    def forward(self, x, training=False):
        if training:
            self._x = x
        return ops.conv3d_forward(x, *self.params)

    def backward(self, grad):
        gx, gw, gb = ops.conv3d_backward(self._x, self.params[0], grad,
                                         need_input_grad=not self.first)
        self.grads = [gw, gb]
        self._x = None
        return gx


class BatchNorm(Layer):
    def __init__(self, gamma, beta, running_mean, running_var):
        super().__init__()
        self.params = [gamma, beta]
        self.buffers = [running_mean, running_var]
        self._cache = None

    def forward(self, x, training=False):
        out, cache = ops.batchnorm_forward(x, *self.params, *self.buffers, training=training)
        if training:
            self._cache = cache
        return out.astype(x.dtype, copy=False)

    def backward(self, grad):
        gx, gg, gb = ops.batchnorm_backward(grad, self._cache)
        self.grads = [gg, gb]
        self._cache = None
        return gx.astype(grad.dtype, copy=False)


class ReLU(Layer):
    def forward(self, x, training=False):
        if training:
            self._x = x
        return ops.relu_forward(x)

    def backward(self, grad):
        gx = ops.relu_backward(self._x, grad)
        self._x = None
        return gx


class MaxPool3D(Layer):
    def __init__(self, size=2):
        super().__init__()
        self.size = size

    def forward(self, x, training=False):
        out, argmax = ops.maxpool3d_forward(x, self.size)
        if training:
            self._argmax, self._shape = argmax, x.shape
        return out

    def backward(self, grad):
        gx = ops.maxpool3d_backward(grad, self._argmax, self._shape, self.size)
        self._argmax = None
        return gx


class Flatten(Layer):
    def forward(self, x, training=False):
        self._shape = x.shape
        return ops.flatten(x)

    def backward(self, grad):
        return ops.unflatten(grad, self._shape)


class Dense(Layer):
    def __init__(self, w, b):
        super().__init__()
        self.params = [w, b]

    def forward(self, x, training=False):
        if training:
            self._x = x
        return ops.dense_forward(x, *self.params)

    def backward(self, grad):
        gx, gw, gb = ops.dense_backward(self._x, self.params[0], grad)
        self.grads = [gw, gb]
        self._x = None
        return gx


# --------------------------------------------------------------------------
# Model
# --------------------------------------------------------------------------

@dataclass
class Model:
    """A built network: layer objects sharing the arrays in ``params``."""

    spec: NetworkSpec
    layers: list[Layer] = field(repr=False)

    @property
    def params(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params]

    @property
    def buffers(self) -> list[np.ndarray]:
        return [b for layer in self.layers for b in layer.buffers]

    @property
    def dtype(self) -> np.dtype:
        return self.params[0].dtype

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        """Logits of shape ``(batch, 1)`` for input ``(batch, d, h, w, channels)``."""
        edge, ch = self.spec.input_edge, self.spec.input_channels
        if x.ndim == 4 and ch == 1:
            x = x[..., None]
        if x.shape[1:] != (edge, edge, edge, ch):
            raise ShapeMismatch(f"model expects (batch, {edge}, {edge}, {edge}, {ch}), got {x.shape}")
        x = np.asarray(x, dtype=self.dtype)
        for layer in self.layers:
            x = layer.forward(x, training)
        return x

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        return ops.sigmoid(self.forward(x))[:, 0]

    def backward(self, grad_logits: np.ndarray) -> list[np.ndarray]:
        """Back-propagate from the logits; returns gradients aligned with ``params``."""
        g = grad_logits
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return [gr for layer in self.layers for gr in layer.grads]

    def astype(self, dtype) -> "Model":
        clone = assemble(self.spec, [p.astype(dtype) for p in self.params],
                         [b.astype(dtype) for b in self.buffers])
        return clone


def assemble(spec: NetworkSpec, params: Sequence[np.ndarray],
             buffers: Sequence[np.ndarray] = ()) -> Model:
    """Wire layer objects around existing parameter arrays (in order)."""
    params, buffers = list(params), list(buffers)
    layers: list[Layer] = []
    first = True
    dense = [l for l in spec.layers if isinstance(l, DenseSpec)]
    for layer in spec.layers:
        if isinstance(layer, ConvSpec):
            layers.append(Conv3D(params.pop(0), params.pop(0), first=first))
            if spec.batchnorm:
                layers.append(BatchNorm(params.pop(0), params.pop(0), buffers.pop(0), buffers.pop(0)))
            layers.append(ReLU())
        elif isinstance(layer, PoolSpec):
            layers.append(MaxPool3D(layer.size))
        elif isinstance(layer, FlattenSpec):
            layers.append(Flatten())
        elif isinstance(layer, DenseSpec):
            layers.append(Dense(params.pop(0), params.pop(0)))
            if layer is not dense[-1]:
                layers.append(ReLU())
        first = False
    if params or buffers:
        raise ShapeIncompatible("leftover arrays after assembling the network")
    return Model(spec, layers)


def param_shapes(spec: NetworkSpec) -> list[tuple[int, ...]]:
    shapes = []
    for layer in spec.layers:
        if isinstance(layer, ConvSpec):
            k = layer.kernel
            shapes += [(k, k, k, layer.in_ch, layer.out_ch), (layer.out_ch,)]
            if spec.batchnorm:
                shapes += [(layer.out_ch,), (layer.out_ch,)]
        elif isinstance(layer, DenseSpec):
            shapes += [(layer.in_features, layer.out_features), (layer.out_features,)]
    return shapes


def buffer_shapes(spec: NetworkSpec) -> list[tuple[int, ...]]:
    if not spec.batchnorm:
        return []
    return [(l.out_ch,) for l in spec.layers if isinstance(l, ConvSpec) for _ in range(2)]


def build_network(spec: NetworkSpec, seed: int, dtype=np.float32) -> Model:
    """Glorot-uniform weights, zero biases; deterministic for a fixed seed."""
    spec.summary()  # validates the stack
    rng = substream(seed, "init")
    params, buffers = [], []
    for layer in spec.layers:
        if isinstance(layer, ConvSpec):
            k = layer.kernel
            fan_in, fan_out = ops.conv_fans(k, layer.in_ch, layer.out_ch)
            params.append(ops.glorot_uniform(fan_in, fan_out, (k, k, k, layer.in_ch, layer.out_ch),
                                             rng, dtype))
            params.append(np.zeros(layer.out_ch, dtype))
            if spec.batchnorm:
                params += [np.ones(layer.out_ch, dtype), np.zeros(layer.out_ch, dtype)]
                buffers += [np.zeros(layer.out_ch, dtype), np.ones(layer.out_ch, dtype)]
        elif isinstance(layer, DenseSpec):
            params.append(ops.glorot_uniform(layer.in_features, layer.out_features,
                                             (layer.in_features, layer.out_features), rng, dtype))
            params.append(np.zeros(layer.out_features, dtype))
    return assemble(spec, params, buffers)
