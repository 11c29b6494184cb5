"""Minimal neural-network engine on flat float64 parameter vectors.

Models are described by a ModelSpec and parameterized by a single 1-D
vector in canonical order: for each layer in sequence, weights
(C-order flattened) followed by biases. forward produces logits; the
softmax lives in the losses module. backward is exact reverse-mode
differentiation of <logits, grad_logits> with respect to the parameters.

All operations are pure: identical inputs give bitwise-identical outputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigurationError, NumericalError
from .seeding import derive_rng


@dataclass(frozen=True)
class DenseLayer:
    """Fully connected layer: x @ W + b with W of shape (n_in, n_out)."""

    n_in: int
    n_out: int
    relu: bool = False

    @property
    def param_count(self) -> int:
        return self.n_in * self.n_out + self.n_out


@dataclass(frozen=True)
class ConvLayer:
    """2-D valid convolution, stride 1, kernel (out_ch, in_ch, k, k) plus bias."""

    in_channels: int
    out_channels: int
    kernel: int
    relu: bool = False

    @property
    def param_count(self) -> int:
        return self.out_channels * self.in_channels * self.kernel * self.kernel + self.out_channels


@dataclass(frozen=True)
class MaxPoolLayer:
    """Non-overlapping max pooling; trailing rows/columns that do not fill a window are dropped."""

    size: int = 2

    @property
    def param_count(self) -> int:
        return 0


Layer = DenseLayer | ConvLayer | MaxPoolLayer


def _layer_out_shape(layer: Layer, in_shape: tuple[int, ...]) -> tuple[int, ...]:
    """Shape produced by `layer` on a single sample of shape `in_shape`."""
    if isinstance(layer, DenseLayer):
        flat = int(np.prod(in_shape))
        if flat != layer.n_in:
            raise ConfigurationError(
                f"dense layer expects {layer.n_in} inputs but previous layer produces {flat}"
            )
        return (layer.n_out,)
    if isinstance(layer, ConvLayer):
        if len(in_shape) != 3:
            raise ConfigurationError("convolution layer requires (channels, height, width) input")
        c, h, w = in_shape
        if c != layer.in_channels:
            raise ConfigurationError(
                f"convolution expects {layer.in_channels} channels but previous layer produces {c}"
            )
        if h < layer.kernel or w < layer.kernel:
            raise ConfigurationError("convolution kernel larger than its input")
        return (layer.out_channels, h - layer.kernel + 1, w - layer.kernel + 1)
    if isinstance(layer, MaxPoolLayer):
        if len(in_shape) != 3:
            raise ConfigurationError("pooling layer requires (channels, height, width) input")
        c, h, w = in_shape
        if h < layer.size or w < layer.size:
            raise ConfigurationError("pooling window larger than its input")
        return (c, h // layer.size, w // layer.size)
    raise ConfigurationError(f"unknown layer type {type(layer).__name__}")


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description: input shape, layer sequence, class count.

    The final layer must be a DenseLayer without activation whose width
    equals num_classes; its outputs are the logits.
    """

    input_shape: tuple[int, ...]
    layers: tuple[Layer, ...]
    num_classes: int

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigurationError("num_classes must be at least 2")
        if not self.layers:
            raise ConfigurationError("model needs at least one layer")
        last = self.layers[-1]
        if not isinstance(last, DenseLayer) or last.relu or last.n_out != self.num_classes:
            raise ConfigurationError("final layer must be a linear DenseLayer with num_classes outputs")
        shape = tuple(self.input_shape)
        for layer in self.layers:
            shape = _layer_out_shape(layer, shape)

    @property
    def input_dim(self) -> int:
        return int(np.prod(self.input_shape))

    @classmethod
    def mlp(cls, input_dim: int, hidden: tuple[int, ...] = (200, 200), num_classes: int = 10) -> "ModelSpec":
        """ReLU multi-layer perceptron: input_dim -> hidden... -> num_classes."""
        layers: list[Layer] = []
        n_in = input_dim
        for width in hidden:
            layers.append(DenseLayer(n_in, width, relu=True))
            n_in = width
        layers.append(DenseLayer(n_in, num_classes))
        return cls(input_shape=(input_dim,), layers=tuple(layers), num_classes=num_classes)

    @classmethod
    def cnn_small(
        cls,
        input_shape: tuple[int, int, int] = (1, 28, 28),
        num_classes: int = 10,
        channels: tuple[int, int] = (8, 16),
        kernel: int = 3,
    ) -> "ModelSpec":
        """Small CNN: two conv/pool stages then a linear classifier head."""
        c, h, w = input_shape
        c1, c2 = channels
        layers: list[Layer] = [
            ConvLayer(c, c1, kernel, relu=True),
            MaxPoolLayer(2),
            ConvLayer(c1, c2, kernel, relu=True),
            MaxPoolLayer(2),
        ]
        shape = input_shape
        for layer in layers:
            shape = _layer_out_shape(layer, shape)
        layers.append(DenseLayer(int(np.prod(shape)), num_classes))
        return cls(input_shape=input_shape, layers=tuple(layers), num_classes=num_classes)


@dataclass
class Batch:
    """A minibatch: inputs (B, d) float64, labels (B,) integers in 1..C."""

    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or self.inputs.shape[0] < 1:
            raise ConfigurationError("batch inputs must be a (B, d) matrix with B >= 1")
        if self.labels.shape != (self.inputs.shape[0],):
            raise ConfigurationError("batch labels must match the input batch dimension")

    def __len__(self) -> int:
        return self.inputs.shape[0]


@dataclass(frozen=True)
class MomentumState:
    """Velocity buffer for classical momentum SGD."""

    velocity: np.ndarray
    momentum: float

    @classmethod
    def zeros(cls, size: int, momentum: float) -> "MomentumState":
        return cls(velocity=np.zeros(size, dtype=np.float64), momentum=momentum)


def param_count(spec: ModelSpec) -> int:
    """Total number of scalar parameters of a model built from `spec`."""
    return sum(layer.param_count for layer in spec.layers)


def init_params(spec: ModelSpec, seed: int) -> np.ndarray:
    """Deterministic initial parameter vector for (spec, seed).

    Weights are drawn from U(-a, a) with a = sqrt(6 / (fan_in + fan_out));
    biases start at zero.
    """
    rng = derive_rng(seed)
    chunks: list[np.ndarray] = []
    for layer in spec.layers:
        if isinstance(layer, DenseLayer):
            limit = math.sqrt(6.0 / (layer.n_in + layer.n_out))
            chunks.append(rng.uniform(-limit, limit, size=(layer.n_in, layer.n_out)).ravel())
            chunks.append(np.zeros(layer.n_out, dtype=np.float64))
        elif isinstance(layer, ConvLayer):
            fan_in = layer.in_channels * layer.kernel * layer.kernel
            fan_out = layer.out_channels * layer.kernel * layer.kernel
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            shape = (layer.out_channels, layer.in_channels, layer.kernel, layer.kernel)
            chunks.append(rng.uniform(-limit, limit, size=shape).ravel())
            chunks.append(np.zeros(layer.out_channels, dtype=np.float64))
    return np.concatenate(chunks)


def _unpack(spec: ModelSpec, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray] | None]:
    """Views of (weights, bias) per layer in canonical order; None for pooling."""
    expected = param_count(spec)
    if params.shape != (expected,):
        raise ConfigurationError(f"parameter vector has length {params.shape}, expected ({expected},)")
    views: list[tuple[np.ndarray, np.ndarray] | None] = []
    offset = 0
    for layer in spec.layers:
        if isinstance(layer, MaxPoolLayer):
            views.append(None)
            continue
        if isinstance(layer, DenseLayer):
            w_shape: tuple[int, ...] = (layer.n_in, layer.n_out)
            n_bias = layer.n_out
        else:
            w_shape = (layer.out_channels, layer.in_channels, layer.kernel, layer.kernel)
            n_bias = layer.out_channels
        n_weights = int(np.prod(w_shape))
        weights = params[offset : offset + n_weights].reshape(w_shape)
        offset += n_weights
        bias = params[offset : offset + n_bias]
        offset += n_bias
        views.append((weights, bias))
    return views


def _im2col(x: np.ndarray, kernel: int) -> np.ndarray:
    """(B, C, H, W) -> (B, H'*W', C*k*k) patch matrix for a valid convolution."""
    windows = np.lib.stride_tricks.sliding_window_view(x, (kernel, kernel), axis=(2, 3))
    batch, channels, out_h, out_w, _, _ = windows.shape
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(batch, out_h * out_w, channels * kernel * kernel)
    return np.ascontiguousarray(cols)


def forward_cached(spec: ModelSpec, params: np.ndarray, batch: Batch) -> tuple[np.ndarray, list]:
    """Forward pass returning (logits, cache); the cache feeds backward_from_cache."""
    params = np.asarray(params, dtype=np.float64)
    if batch.inputs.shape[1] != spec.input_dim:
        raise ConfigurationError(
            f"batch has {batch.inputs.shape[1]} input features, model expects {spec.input_dim}"
        )
    views = _unpack(spec, params)
    n = len(batch)
    x: np.ndarray = batch.inputs
    if len(spec.input_shape) == 3:
        x = x.reshape(n, *spec.input_shape)
    cache: list = []
    for layer, view in zip(spec.layers, views):
        if isinstance(layer, DenseLayer):
            pre_flatten = x.shape
            if x.ndim > 2:
                x = x.reshape(n, -1)
            weights, bias = view
            z = x @ weights + bias
            mask = None
            if layer.relu:
                mask = z > 0.0
                z = np.where(mask, z, 0.0)
            cache.append(("dense", x, mask, pre_flatten))
            x = z
        elif isinstance(layer, ConvLayer):
            weights, bias = view
            in_shape = x.shape
            cols = _im2col(x, layer.kernel)
            w_mat = weights.reshape(layer.out_channels, -1)
            z = cols @ w_mat.T + bias
            out_h = in_shape[2] - layer.kernel + 1
            out_w = in_shape[3] - layer.kernel + 1
            z = z.transpose(0, 2, 1).reshape(n, layer.out_channels, out_h, out_w)
            mask = None
            if layer.relu:
                mask = z > 0.0
                z = np.where(mask, z, 0.0)
            cache.append(("conv", cols, mask, in_shape))
            x = z
        else:
            s = layer.size
            _, channels, h, w = x.shape
            out_h, out_w = h // s, w // s
            windows = x[:, :, : out_h * s, : out_w * s].reshape(n, channels, out_h, s, out_w, s)
            flat = windows.transpose(0, 1, 2, 4, 3, 5).reshape(n, channels, out_h, out_w, s * s)
            argmax = flat.argmax(axis=-1)
            cache.append(("pool", argmax, x.shape))
            x = np.take_along_axis(flat, argmax[..., None], axis=-1)[..., 0]
    return x, cache


def forward(spec: ModelSpec, params: np.ndarray, batch: Batch) -> np.ndarray:
    """Logits (B, num_classes) for a batch; deterministic and side-effect free."""
    return forward_cached(spec, params, batch)[0]


def backward_from_cache(
    spec: ModelSpec, params: np.ndarray, cache: list, grad_logits: np.ndarray
) -> np.ndarray:
    """Gradient of <logits, grad_logits> w.r.t. params, reusing a forward cache."""
    params = np.asarray(params, dtype=np.float64)
    views = _unpack(spec, params)
    layer_grads: list[tuple[np.ndarray, np.ndarray] | None] = [None] * len(spec.layers)
    dx = np.asarray(grad_logits, dtype=np.float64)
    for i in range(len(spec.layers) - 1, -1, -1):
        layer = spec.layers[i]
        entry = cache[i]
        if isinstance(layer, DenseLayer):
            _, x_in, mask, pre_flatten = entry
            weights, _ = views[i]
            dz = np.where(mask, dx, 0.0) if mask is not None else dx
            layer_grads[i] = (x_in.T @ dz, dz.sum(axis=0))
            dx = dz @ weights.T
            if len(pre_flatten) > 2:
                dx = dx.reshape(pre_flatten)
        elif isinstance(layer, ConvLayer):
            _, cols, mask, in_shape = entry
            weights, _ = views[i]
            dz = np.where(mask, dx, 0.0) if mask is not None else dx
            n, out_ch, out_h, out_w = dz.shape
            dz_flat = dz.reshape(n, out_ch, out_h * out_w)
            w_mat = weights.reshape(out_ch, -1)
            dw_mat = np.einsum("bop,bpf->of", dz_flat, cols)
            db = dz.sum(axis=(0, 2, 3))
            dcols = np.einsum("bop,of->bpf", dz_flat, w_mat)
            layer_grads[i] = (dw_mat.reshape(weights.shape), db)
            k = layer.kernel
            dcols = dcols.reshape(n, out_h, out_w, layer.in_channels, k, k)
            dx = np.zeros(in_shape, dtype=np.float64)
            for di in range(k):
                for dj in range(k):
                    dx[:, :, di : di + out_h, dj : dj + out_w] += dcols[:, :, :, :, di, dj].transpose(
                        0, 3, 1, 2
                    )
        else:
            _, argmax, in_shape = entry
            s = layer.size
            n, channels, out_h, out_w = dx.shape
            dflat = np.zeros((n, channels, out_h, out_w, s * s), dtype=np.float64)
            np.put_along_axis(dflat, argmax[..., None], dx[..., None], axis=-1)
            dwin = dflat.reshape(n, channels, out_h, out_w, s, s).transpose(0, 1, 2, 4, 3, 5)
            dx_full = np.zeros(in_shape, dtype=np.float64)
            dx_full[:, :, : out_h * s, : out_w * s] = dwin.reshape(n, channels, out_h * s, out_w * s)
            dx = dx_full
    chunks: list[np.ndarray] = []
    for grad in layer_grads:
        if grad is not None:
            dw, db = grad
            chunks.append(dw.ravel())
            chunks.append(db)
    return np.concatenate(chunks)


def backward(spec: ModelSpec, params: np.ndarray, batch: Batch, grad_logits: np.ndarray) -> np.ndarray:
    """Exact reverse-mode gradient of <logits, grad_logits> with respect to params."""
    grad_logits = np.asarray(grad_logits, dtype=np.float64)
    if grad_logits.shape != (len(batch), spec.num_classes):
        raise ConfigurationError(
            f"grad_logits has shape {grad_logits.shape}, expected {(len(batch), spec.num_classes)}"
        )
    _, cache = forward_cached(spec, params, batch)
    return backward_from_cache(spec, params, cache, grad_logits)


def sgd_step(
    params: np.ndarray, grad: np.ndarray, state: MomentumState, lr: float
) -> tuple[np.ndarray, MomentumState]:
    """One classical-momentum step: v <- mu*v + g, params <- params - lr*v."""
    if params.shape != grad.shape:
        raise ConfigurationError("parameter and gradient vectors have different lengths")
    if not np.all(np.isfinite(grad)):
        raise NumericalError("non-finite gradient")
    velocity = state.momentum * state.velocity + grad
    return params - lr * velocity, replace(state, velocity=velocity)


def split_segments(params: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split a flat vector at ceil(P/2) into (leading, trailing) segments."""
    total = params.shape[0]
    if total < 2:
        raise ConfigurationError("cannot split a vector with fewer than 2 entries")
    cut = (total + 1) // 2
    return params[:cut].copy(), params[cut:].copy()


def join_segments(leading: np.ndarray, trailing: np.ndarray) -> np.ndarray:
    """Inverse of split_segments; concatenation restores the original vector."""
    return np.concatenate([leading, trailing])
