"""Small NHWC neural-network engine: forward, backward and SGD on flat parameters.

Models are described by a :class:`ModelArch` (an ordered tuple of layer
descriptors ending in a softmax cross-entropy head) and their weights live in
one flat :class:`ParamVector`. All functions are pure: they never mutate their
inputs, so a global snapshot can be shared by concurrent client jobs.

Computation runs in the dtype of the parameter vector (float32 for training,
float64 for gradient checks). Loss means and norms accumulate in float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, LayoutError, NumericError

Shape = tuple[int, ...]


# ---------------------------------------------------------------- parameters


@dataclass(frozen=True)
class Segment:
    name: str
    offset: int
    shape: Shape

    @property
    def size(self) -> int:
        return math.prod(self.shape)


@dataclass(frozen=True)
class Layout:
    segments: tuple[Segment, ...]

    @property
    def size(self) -> int:
        if not self.segments:
            return 0
        last = self.segments[-1]
        return last.offset + last.size

    def __getitem__(self, name: str) -> Segment:
        for seg in self.segments:
            if seg.name == name:
                return seg
        raise KeyError(name)


class ParamVector:
    """Flat parameter values plus the segment layout that gives them meaning."""

    __slots__ = ("values", "layout")

    def __init__(self, values: np.ndarray, layout: Layout):
        values = np.asarray(values)
        if values.ndim != 1 or values.size != layout.size:
            raise LayoutError(f"expected flat vector of length {layout.size}, got shape {values.shape}")
        self.values = values
        self.layout = layout

    @classmethod
    def zeros(cls, layout: Layout, dtype=np.float32) -> ParamVector:
        return cls(np.zeros(layout.size, dtype=dtype), layout)

    def zeros_like(self) -> ParamVector:
        return ParamVector(np.zeros_like(self.values), self.layout)

    def copy(self) -> ParamVector:
        return ParamVector(self.values.copy(), self.layout)

    def astype(self, dtype) -> ParamVector:
        return ParamVector(self.values.astype(dtype), self.layout)

    def view(self, name: str) -> np.ndarray:
        seg = self.layout[name]
        return self.values[seg.offset:seg.offset + seg.size].reshape(seg.shape)

    def norm(self) -> float:
        v = self.values.astype(np.float64)
        return float(np.sqrt(np.dot(v, v)))

    def check_layout(self, other: ParamVector) -> None:
        if self.layout != other.layout:
            raise LayoutError("parameter layouts differ")

    def __add__(self, other: ParamVector) -> ParamVector:
        self.check_layout(other)
        return ParamVector(self.values + other.values, self.layout)

    def __sub__(self, other: ParamVector) -> ParamVector:
        self.check_layout(other)
        return ParamVector(self.values - other.values, self.layout)

    def __mul__(self, scalar: float) -> ParamVector:
        return ParamVector((self.values * scalar).astype(self.values.dtype, copy=False), self.layout)

    __rmul__ = __mul__

    def __len__(self) -> int:
        return self.values.size

    def __repr__(self) -> str:
        return f"ParamVector(n={self.values.size}, dtype={self.values.dtype}, segments={len(self.layout.segments)})"


# -------------------------------------------------------------------- layers


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int

    kind = "dense"

    def out_shape(self, shape: Shape) -> Shape:
        if shape != (self.in_features,):
            raise ConfigurationError(f"dense expects input ({self.in_features},), got {shape}")
        return (self.out_features,)

    def param_shapes(self, shape: Shape) -> dict[str, Shape]:
        return {"weight": (self.in_features, self.out_features), "bias": (self.out_features,)}

    def fans(self) -> tuple[int, int]:
        return self.in_features, self.out_features

    def forward(self, x, p):
        return x @ p["weight"] + p["bias"], x

    def backward(self, dy, cache, p, need_dx=True):
        x = cache
        grads = {"weight": x.T @ dy, "bias": dy.sum(axis=0)}
        dx = dy @ p["weight"].T if need_dx else None
        return dx, grads


@dataclass(frozen=True)
class Conv2d:
    """Valid-padding convolution over NHWC input; weight shape (in, k, k, out)."""

    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1

    kind = "conv2d"

    def out_shape(self, shape: Shape) -> Shape:
        if len(shape) != 3 or shape[2] != self.in_channels:
            raise ConfigurationError(f"conv2d expects (H, W, {self.in_channels}), got {shape}")
        h, w, _ = shape
        if h < self.kernel or w < self.kernel:
            raise ConfigurationError(f"conv2d kernel {self.kernel} larger than input {shape}")
        ho = (h - self.kernel) // self.stride + 1
        wo = (w - self.kernel) // self.stride + 1
        return (ho, wo, self.out_channels)

    def param_shapes(self, shape: Shape) -> dict[str, Shape]:
        k = self.kernel
        return {"weight": (self.in_channels, k, k, self.out_channels), "bias": (self.out_channels,)}

    def fans(self) -> tuple[int, int]:
        area = self.kernel * self.kernel
        return self.in_channels * area, self.out_channels * area

    def forward(self, x, p):
        k, s = self.kernel, self.stride
        # windows: [N, Ho, Wo, C, k, k]
        win = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::s, ::s]
        n, ho, wo = win.shape[:3]
        cols = win.reshape(n * ho * wo, -1)
        w = p["weight"].reshape(-1, self.out_channels)
        y = (cols @ w + p["bias"]).reshape(n, ho, wo, self.out_channels)
        return y, (x.shape, cols, (n, ho, wo))

    def backward(self, dy, cache, p, need_dx=True):
        x_shape, cols, (n, ho, wo) = cache
        k, s = self.kernel, self.stride
        dy2 = dy.reshape(n * ho * wo, self.out_channels)
        grads = {
            "weight": (cols.T @ dy2).reshape(p["weight"].shape),
            "bias": dy2.sum(axis=0),
        }
        if not need_dx:
            return None, grads
        # weight as (out, k, k, in) so each (i, j) slice of dcols is contiguous after the transpose
        w = p["weight"].transpose(3, 1, 2, 0).reshape(self.out_channels, -1)
        dcols = (dy2 @ w).reshape(n, ho, wo, k, k, self.in_channels).transpose(3, 4, 0, 1, 2, 5).copy()
        dx = np.zeros(x_shape, dtype=dy.dtype)
        for i in range(k):
            for j in range(k):
                dx[:, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s, :] += dcols[i, j]
        return dx, grads


@dataclass(frozen=True)
class ReLU:
    kind = "relu"

    def out_shape(self, shape):
        return shape

    def param_shapes(self, shape):
        return {}

    def forward(self, x, p):
        mask = x > 0
        return x * mask, mask

    def backward(self, dy, cache, p, need_dx=True):
        return dy * cache, {}


@dataclass(frozen=True)
class MaxPool2d:
    """Non-overlapping pooling (stride == kernel); trailing rows/cols are dropped."""

    kernel: int = 2

    kind = "maxpool2d"

    def out_shape(self, shape):
        if len(shape) != 3:
            raise ConfigurationError(f"maxpool2d expects (H, W, C), got {shape}")
        h, w, c = shape
        if h < self.kernel or w < self.kernel:
            raise ConfigurationError(f"maxpool2d kernel {self.kernel} larger than input {shape}")
        return (h // self.kernel, w // self.kernel, c)

    def param_shapes(self, shape):
        return {}

    def forward(self, x, p):
        k = self.kernel
        ho, wo = x.shape[1] // k, x.shape[2] // k
        views = [x[:, di:ho * k:k, dj:wo * k:k, :] for di in range(k) for dj in range(k)]
        y = views[0]
        for v in views[1:]:
            y = np.maximum(y, v)
        return y, (x, y)

    def backward(self, dy, cache, p, need_dx=True):
        # gradient goes to the first maximal element of each window
        x, y = cache
        k = self.kernel
        ho, wo = y.shape[1], y.shape[2]
        dx = np.zeros_like(x, dtype=dy.dtype)
        free = np.ones(y.shape, dtype=bool)
        for di in range(k):
            for dj in range(k):
                hit = (x[:, di:ho * k:k, dj:wo * k:k, :] == y) & free
                dx[:, di:ho * k:k, dj:wo * k:k, :] = dy * hit
                free &= ~hit
        return dx, {}


@dataclass(frozen=True)
class Flatten:
    kind = "flatten"

    def out_shape(self, shape):
        return (math.prod(shape),)

    def param_shapes(self, shape):
        return {}

    def forward(self, x, p):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dy, cache, p, need_dx=True):
        return dy.reshape(cache), {}


@dataclass(frozen=True)
class SoftmaxCrossEntropy:
    """Loss head. Must be the last layer; ``forward`` stops before it."""

    kind = "softmax_ce"

    def out_shape(self, shape):
        if len(shape) != 1 or shape[0] < 2:
            raise ConfigurationError(f"loss head needs (C,) logits with C >= 2, got {shape}")
        return shape

    def param_shapes(self, shape):
        return {}


Layer = Dense | Conv2d | ReLU | MaxPool2d | Flatten | SoftmaxCrossEntropy


@dataclass(frozen=True)
class ModelArch:
    input_shape: Shape
    layers: tuple
    _shapes: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        heads = [i for i, l in enumerate(self.layers) if isinstance(l, SoftmaxCrossEntropy)]
        if len(heads) != 1 or heads[0] != len(self.layers) - 1:
            raise ConfigurationError("architecture needs exactly one loss head, as the last layer")
        shapes = [self.input_shape]
        for i, layer in enumerate(self.layers):
            try:
                shapes.append(layer.out_shape(shapes[-1]))
            except ConfigurationError as exc:
                raise ConfigurationError(f"layer {i} ({layer.kind}): {exc}") from None
        object.__setattr__(self, "_shapes", tuple(shapes))

    @property
    def num_classes(self) -> int:
        return self._shapes[-1][0]

    def in_shape(self, i: int) -> Shape:
        return self._shapes[i]

    @cached_property
    def layout(self) -> Layout:
        segs, offset = [], 0
        for i, layer in enumerate(self.layers):
            for pname, shape in layer.param_shapes(self._shapes[i]).items():
                seg = Segment(f"{i}.{layer.kind}.{pname}", offset, tuple(shape))
                segs.append(seg)
                offset += seg.size
        return Layout(tuple(segs))

    @property
    def num_params(self) -> int:
        return self.layout.size

    def penultimate_index(self) -> int:
        """Index of the last parametrised layer; its input is the feature vector."""
        return max(i for i, l in enumerate(self.layers) if isinstance(l, (Dense, Conv2d)))


def cnn_arch(input_shape=(28, 28, 1), num_classes=10, conv1=16, conv2=32, kernel=5, hidden=128) -> ModelArch:
    """The desk-scale "2Conv + 2fc" classifier."""
    h, w, c = input_shape
    flat_h = ((h - kernel + 1) // 2 - kernel + 1) // 2
    flat_w = ((w - kernel + 1) // 2 - kernel + 1) // 2
    return ModelArch(input_shape, (
        Conv2d(c, conv1, kernel), ReLU(), MaxPool2d(2),
        Conv2d(conv1, conv2, kernel), ReLU(), MaxPool2d(2),
        Flatten(),
        Dense(flat_h * flat_w * conv2, hidden), ReLU(),
        Dense(hidden, num_classes),
        SoftmaxCrossEntropy(),
    ))


def mlp_arch(input_shape, num_classes, hidden=(64,)) -> ModelArch:
    layers: list = [Flatten()]
    width = math.prod(input_shape)
    for h in hidden:
        layers += [Dense(width, h), ReLU()]
        width = h
    layers += [Dense(width, num_classes), SoftmaxCrossEntropy()]
    return ModelArch(input_shape, tuple(layers))


def logistic_arch(input_shape, num_classes) -> ModelArch:
    return mlp_arch(input_shape, num_classes, hidden=())


# ----------------------------------------------------------------- functions


def init_params(arch: ModelArch, rng: np.random.Generator, dtype=np.float32) -> ParamVector:
    """Uniform(-a, a) per segment with a = sqrt(6 / (fan_in + fan_out))."""
    values = np.empty(arch.num_params, dtype=dtype)
    for seg in arch.layout.segments:
        layer = arch.layers[int(seg.name.split(".", 1)[0])]
        fan_in, fan_out = layer.fans()
        a = math.sqrt(6.0 / (fan_in + fan_out))
        values[seg.offset:seg.offset + seg.size] = rng.uniform(-a, a, seg.size)
    return ParamVector(values, arch.layout)


def _layer_params(arch: ModelArch, params: ParamVector, i: int) -> dict[str, np.ndarray]:
    layer = arch.layers[i]
    return {pname: params.view(f"{i}.{layer.kind}.{pname}") for pname in layer.param_shapes(arch.in_shape(i))}


def _check(arch: ModelArch, params: ParamVector, batch) -> np.ndarray:
    if params.layout != arch.layout:
        raise ConfigurationError("parameter layout does not match architecture")
    x = np.asarray(batch)
    if x.shape[1:] != arch.input_shape:
        raise ConfigurationError(f"batch shape {x.shape[1:]} does not match arch input {arch.input_shape}")
    return x.astype(params.values.dtype, copy=False)


def _run(arch, params, x, stop: int, keep: bool):
    caches = []
    for i in range(stop):
        x, cache = arch.layers[i].forward(x, _layer_params(arch, params, i))
        if keep:
            caches.append(cache)
    return x, caches


def forward(arch: ModelArch, params: ParamVector, batch) -> np.ndarray:
    """Logits of shape [B, C]."""
    x = _check(arch, params, batch)
    logits, _ = _run(arch, params, x, len(arch.layers) - 1, keep=False)
    if not np.isfinite(logits).all():
        raise NumericError("non-finite logits", layer=len(arch.layers) - 2)
    return logits


def features(arch: ModelArch, params: ParamVector, batch) -> np.ndarray:
    """Activations feeding the final dense layer (the penultimate representation)."""
    x = _check(arch, params, batch)
    out, _ = _run(arch, params, x, arch.penultimate_index(), keep=False)
    return out.reshape(out.shape[0], -1)


def _softmax_ce(logits: np.ndarray, labels: np.ndarray):
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    sum_exp = exp.sum(axis=1, keepdims=True)
    log_probs = shifted - np.log(sum_exp)
    b = logits.shape[0]
    loss = -float(np.mean(log_probs[np.arange(b), labels].astype(np.float64)))
    dlogits = exp / sum_exp
    dlogits[np.arange(b), labels] -= 1.0
    dlogits /= b
    return loss, dlogits


def loss_and_grad(arch: ModelArch, params: ParamVector, batch, labels) -> tuple[float, ParamVector]:
    """Mean softmax cross-entropy over the batch and its gradient."""
    x = _check(arch, params, batch)
    labels = np.asarray(labels, dtype=np.int64)
    if x.shape[0] == 0:
        raise ConfigurationError("empty batch")
    if labels.shape != (x.shape[0],):
        raise ConfigurationError("labels must be a vector matching the batch size")
    if labels.min() < 0 or labels.max() >= arch.num_classes:
        raise ConfigurationError(f"labels must lie in [0, {arch.num_classes})")

    n_body = len(arch.layers) - 1
    caches = []
    for i in range(n_body):
        x, cache = arch.layers[i].forward(x, _layer_params(arch, params, i))
        if not np.isfinite(x).all():
            raise NumericError(f"non-finite activations in layer {i} ({arch.layers[i].kind})", layer=i)
        caches.append(cache)
    loss, dy = _softmax_ce(x, labels)
    if not math.isfinite(loss):
        raise NumericError("non-finite loss", layer=n_body)

    grad = ParamVector.zeros(params.layout, dtype=params.values.dtype)
    first_param = min((i for i in range(n_body) if arch.layers[i].param_shapes(arch.in_shape(i))), default=0)
    for i in range(n_body - 1, -1, -1):
        layer = arch.layers[i]
        p = _layer_params(arch, params, i)
        dy, grads = layer.backward(dy, caches[i], p, need_dx=i > first_param)
        for pname, g in grads.items():
            grad.view(f"{i}.{layer.kind}.{pname}")[...] = g
        if i <= first_param:
            break
    if not np.isfinite(grad.values).all():
        raise NumericError("non-finite gradient", layer=None)
    return loss, grad


def sgd_step(params: ParamVector, grad: ParamVector, lr: float) -> ParamVector:
    params.check_layout(grad)
    if lr < 0:
        raise ConfigurationError("learning rate must be non-negative")
    return ParamVector(params.values - params.values.dtype.type(lr) * grad.values, params.layout)


def momentum_step(params: ParamVector, grad: ParamVector, velocity: np.ndarray | None, lr: float,
                  momentum: float) -> tuple[ParamVector, np.ndarray]:
    """Heavy-ball SGD: v = mu * v + g; w = w - lr * v. ``velocity=None`` starts from zero."""
    if not 0 <= momentum < 1:
        raise ConfigurationError("momentum must lie in [0, 1)")
    params.check_layout(grad)
    if lr < 0:
        raise ConfigurationError("learning rate must be non-negative")
    dt = params.values.dtype.type
    v = grad.values.copy() if velocity is None else dt(momentum) * velocity + grad.values
    return ParamVector(params.values - dt(lr) * v, params.layout), v


def predict(arch: ModelArch, params: ParamVector, batch, chunk: int = 1000) -> np.ndarray:
    """Argmax class per sample; ties go to the lowest class index."""
    x = np.asarray(batch)
    out = [predict_logits(forward(arch, params, x[s:s + chunk])) for s in range(0, len(x), chunk)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def predict_logits(logits: np.ndarray) -> np.ndarray:
    return np.argmax(logits, axis=1)

