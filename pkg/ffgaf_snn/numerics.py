"""
Dense tensor primitives with hand-written backward passes.

Every tensor is a :class:`numpy.ndarray`. Activations are laid out N×C×H×W, spiking activations T×N×C×H×W.
The backward functions recompute what they need from the forward inputs, so each forward/backward pair can be
checked against finite differences in isolation.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum, auto
from typing import NamedTuple, Optional, Tuple

import numpy as np

from ffgaf_snn.exceptions import ConfigError, NumericError, ShapeError

__all__ = ['Tensor', 'DEFAULT_DTYPE', 'NormMode', 'ConvParams', 'NormParams', 'ConvGrads', 'NormGrads', 'conv2d',
           'conv2d_backward', 'normalize', 'normalize_backward', 'relu', 'relu_backward', 'check_finite',
           'output_extent']

Tensor = np.ndarray

DEFAULT_DTYPE = np.float32
"""
The dtype parameters are created with for training, tests build float64 parameters for gradient checks.
"""


def check_finite(x: Tensor, what: str) -> Tensor:
    """
    :return: x, unchanged
    :raises NumericError: if x holds a NaN or an infinity
    """
    if not np.all(np.isfinite(x)):
        raise NumericError(f'non-finite value detected in {what}')
    return x


def output_extent(size: int, kernel: int, stride: int, padding: int) -> int:
    """
    :return: the spatial extent of a convolution output along one axis
    """
    return (size + 2 * padding - kernel) // stride + 1


@dataclass
class ConvParams:
    """
    Parameters of a channel-weighted convolution: out[:, j] = channel_weight[j] * (x ⊛ kernels[j]) + bias[j]
    """
    kernels: Tensor
    bias: Tensor
    channel_weight: Tensor
    stride: int = 1
    padding: int = 1

    def __post_init__(self):
        if self.kernels.ndim != 4 or self.kernels.shape[2] != self.kernels.shape[3]:
            raise ShapeError(f'kernels must be C_out×C_in×k×k, got shape {self.kernels.shape}')
        if self.kernels.shape[2] < 1:
            raise ConfigError('kernel size must be at least 1')
        if self.stride < 1:
            raise ConfigError(f'stride must be at least 1, got {self.stride}')
        if self.padding < 0:
            raise ConfigError(f'padding must be non-negative, got {self.padding}')
        c_out = self.kernels.shape[0]
        if self.bias.shape != (c_out,):
            raise ShapeError(f'bias must have C_out={c_out} entries, got shape {self.bias.shape}')
        if self.channel_weight.shape != (c_out,):
            raise ShapeError(f'channel_weight must have C_out={c_out} entries, got shape {self.channel_weight.shape}')

    @classmethod
    def init(cls, c_in: int, c_out: int, rng: np.random.Generator, kernel: int = 3, stride: int = 1,
             padding: int = 1, dtype=DEFAULT_DTYPE) -> ConvParams:
        """
        He-style normal kernels scaled by fan-in, zero biases and unit channel weights.
        """
        fan_in = c_in * kernel * kernel
        kernels = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(c_out, c_in, kernel, kernel)).astype(dtype)
        return cls(kernels, np.zeros(c_out, dtype=dtype), np.ones(c_out, dtype=dtype), stride, padding)

    @property
    def c_in(self) -> int:
        return self.kernels.shape[1]

    @property
    def c_out(self) -> int:
        return self.kernels.shape[0]

    @property
    def kernel(self) -> int:
        return self.kernels.shape[2]


class ConvGrads(NamedTuple):
    x: Optional[Tensor]
    kernels: Tensor
    bias: Tensor
    channel_weight: Tensor


class _ConvCache(NamedTuple):
    col: Tensor
    raw: Tensor  # x ⊛ kernels, before channel weighting and bias
    x_shape: Tuple[int, ...]


def _im2col(x: Tensor, k: int, stride: int, padding: int) -> Tuple[Tensor, int, int]:
    n, c, h, w = x.shape
    out_h = output_extent(h, k, stride, padding)
    out_w = output_extent(w, k, stride, padding)
    img = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)), mode='constant')
    col = np.empty((n, c, k, k, out_h, out_w), dtype=x.dtype)
    for i in range(k):
        i_max = i + stride * out_h
        for j in range(k):
            j_max = j + stride * out_w
            col[:, :, i, j, :, :] = img[:, :, i:i_max:stride, j:j_max:stride]
    # (N, out_h, out_w, C, k, k) -> one row per output position
    return col.transpose(0, 4, 5, 1, 2, 3).reshape(n * out_h * out_w, -1), out_h, out_w


def _col2im(col: Tensor, x_shape: Tuple[int, ...], k: int, stride: int, padding: int) -> Tensor:
    n, c, h, w = x_shape
    out_h = output_extent(h, k, stride, padding)
    out_w = output_extent(w, k, stride, padding)
    col = col.reshape(n, out_h, out_w, c, k, k).transpose(0, 3, 4, 5, 1, 2)
    img = np.zeros((n, c, h + 2 * padding + stride - 1, w + 2 * padding + stride - 1), dtype=col.dtype)
    for i in range(k):
        i_max = i + stride * out_h
        for j in range(k):
            j_max = j + stride * out_w
            # overlapping windows accumulate
            img[:, :, i:i_max:stride, j:j_max:stride] += col[:, :, i, j, :, :]
    return img[:, :, padding:padding + h, padding:padding + w]


def _check_conv_input(x: Tensor, p: ConvParams):
    if x.ndim != 4:
        raise ShapeError(f'convolution input must be N×C×H×W, got {x.ndim} dimensions')
    if x.shape[1] != p.c_in:
        raise ShapeError(f'channel dimension mismatch: input has C_in={x.shape[1]}, kernels expect {p.c_in}')
    for axis, size in (('H', x.shape[2]), ('W', x.shape[3])):
        if output_extent(size, p.kernel, p.stride, p.padding) < 1:
            raise ShapeError(f'spatial dimension {axis}={size} too small for kernel {p.kernel} '
                             f'with padding {p.padding}')


def _conv2d_cached(x: Tensor, p: ConvParams) -> Tuple[Tensor, _ConvCache]:
    _check_conv_input(x, p)
    n = x.shape[0]
    col, out_h, out_w = _im2col(x, p.kernel, p.stride, p.padding)
    raw = (col @ p.kernels.reshape(p.c_out, -1).T).reshape(n, out_h, out_w, p.c_out).transpose(0, 3, 1, 2)
    out = raw * p.channel_weight[None, :, None, None] + p.bias[None, :, None, None]
    return out, _ConvCache(col, raw, x.shape)


def _conv2d_backward_cached(cache: _ConvCache, p: ConvParams, grad_out: Tensor,
                            input_grad: bool = True) -> ConvGrads:
    if grad_out.shape != cache.raw.shape:
        raise ShapeError(f'grad_out shape {grad_out.shape} does not match convolution output {cache.raw.shape}')
    grad_bias = grad_out.sum(axis=(0, 2, 3))
    grad_channel_weight = (grad_out * cache.raw).sum(axis=(0, 2, 3))
    grad_raw = (grad_out * p.channel_weight[None, :, None, None]).transpose(0, 2, 3, 1).reshape(-1, p.c_out)
    grad_kernels = (grad_raw.T @ cache.col).reshape(p.kernels.shape)
    grad_x = None
    if input_grad:
        grad_col = grad_raw @ p.kernels.reshape(p.c_out, -1)
        grad_x = _col2im(grad_col, cache.x_shape, p.kernel, p.stride, p.padding)
    return ConvGrads(grad_x, grad_kernels, grad_bias, grad_channel_weight)


def conv2d(x: Tensor, p: ConvParams) -> Tensor:
    """
    Channel-weighted 2d convolution.
    :param x: input of shape N×C_in×H×W
    :param p: the convolution parameters
    :return: output of shape N×C_out×H'×W', H' = floor((H + 2·padding - k) / stride) + 1
    :raises ShapeError: if x does not fit the kernels
    """
    return _conv2d_cached(x, p)[0]


def conv2d_backward(x: Tensor, p: ConvParams, grad_out: Tensor) -> ConvGrads:
    """
    :param x: the forward input
    :param p: the convolution parameters
    :param grad_out: gradient with respect to conv2d's output
    :return: gradients with respect to the input, kernels, bias and channel weights
    """
    _, cache = _conv2d_cached(x, p)
    return _conv2d_backward_cached(cache, p, grad_out)


class NormMode(Enum):
    batch = auto()
    """
    Per-channel statistics over N, H, W of an N×C×H×W tensor
    """
    temporal = auto()
    """
    Per-channel statistics over T, N, H, W of a T×N×C×H×W tensor
    """


_norm_ndim = {NormMode.batch: 4, NormMode.temporal: 5}


@dataclass
class NormParams:
    gamma: Tensor
    beta: Tensor
    running_mean: Tensor
    running_var: Tensor
    mode: NormMode = NormMode.batch
    momentum: float = 0.1
    epsilon: float = 1e-5

    def __post_init__(self):
        if not 0 < self.momentum < 1:
            raise ConfigError(f'momentum must lie in (0, 1), got {self.momentum}')
        if self.epsilon <= 0:
            raise ConfigError(f'epsilon must be positive, got {self.epsilon}')
        c = len(self.gamma)
        for name in ('beta', 'running_mean', 'running_var'):
            if getattr(self, name).shape != (c,):
                raise ShapeError(f'{name} must have C={c} entries')

    @classmethod
    def init(cls, channels: int, mode: NormMode = NormMode.batch, gamma0: float = 1.0, momentum: float = 0.1,
             epsilon: float = 1e-5, dtype=DEFAULT_DTYPE) -> NormParams:
        return cls(np.full(channels, gamma0, dtype=dtype), np.zeros(channels, dtype=dtype),
                   np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype), mode, momentum, epsilon)

    @property
    def channels(self) -> int:
        return len(self.gamma)


class NormGrads(NamedTuple):
    x: Tensor
    gamma: Tensor
    beta: Tensor


def _norm_axes(x: Tensor, p: NormParams) -> Tuple[Tuple[int, ...], Tuple[int, ...]]:
    expected = _norm_ndim[p.mode]
    if x.ndim != expected:
        raise ShapeError(f'{p.mode.name} normalization expects {expected} dimensions, got {x.ndim}')
    channel_axis = x.ndim - 3
    if x.shape[channel_axis] != p.channels:
        raise ShapeError(f'channel dimension mismatch: input has C={x.shape[channel_axis]}, '
                         f'normalization expects {p.channels}')
    axes = tuple(a for a in range(x.ndim) if a != channel_axis)
    view = [1] * x.ndim
    view[channel_axis] = -1
    return axes, tuple(view)


def _standardize(x: Tensor, p: NormParams) -> Tuple[Tensor, Tensor, Tensor]:
    axes, view = _norm_axes(x, p)
    mean = x.mean(axis=axes)
    var = x.var(axis=axes)
    inv_std = 1.0 / np.sqrt(var + p.epsilon)
    x_hat = (x - mean.reshape(view)) * inv_std.reshape(view)
    return x_hat, mean, var


def normalize(x: Tensor, p: NormParams, training: bool) -> Tensor:
    """
    Per-channel standardization followed by the affine map (gamma, beta).
    In training mode batch statistics are used and the running statistics are updated in place with p.momentum,
    otherwise the running statistics are used.
    """
    axes, view = _norm_axes(x, p)
    if training:
        x_hat, mean, var = _standardize(x, p)
        m = p.momentum
        p.running_mean[...] = (1 - m) * p.running_mean + m * mean
        p.running_var[...] = (1 - m) * p.running_var + m * var
    else:
        x_hat = (x - p.running_mean.reshape(view)) / np.sqrt(p.running_var.reshape(view) + p.epsilon)
    return x_hat * p.gamma.reshape(view) + p.beta.reshape(view)


def normalize_backward(x: Tensor, p: NormParams, grad_out: Tensor) -> NormGrads:
    """
    Backward pass of training-mode normalization (batch statistics).
    """
    axes, view = _norm_axes(x, p)
    if grad_out.shape != x.shape:
        raise ShapeError(f'grad_out shape {grad_out.shape} does not match input {x.shape}')
    x_hat, _, var = _standardize(x, p)
    count = x.size // p.channels
    inv_std = (1.0 / np.sqrt(var + p.epsilon)).reshape(view)
    grad_gamma = (grad_out * x_hat).sum(axis=axes)
    grad_beta = grad_out.sum(axis=axes)
    grad_x_hat = grad_out * p.gamma.reshape(view)
    grad_x = inv_std / count * (
        count * grad_x_hat
        - grad_x_hat.sum(axis=axes).reshape(view)
        - x_hat * (grad_x_hat * x_hat).sum(axis=axes).reshape(view)
    )
    return NormGrads(grad_x, grad_gamma, grad_beta)


def relu(x: Tensor) -> Tensor:
    return np.maximum(x, 0)


def relu_backward(x: Tensor, grad_out: Tensor, mask: Optional[Tensor] = None) -> Tensor:
    """
    Gradient of relu, the gradient at exactly 0 is 0.
    :param mask: an optional precomputed boolean mask of where x > 0
    """
    if mask is None:
        mask = x > 0
    return np.where(mask, grad_out, 0).astype(grad_out.dtype, copy=False)
