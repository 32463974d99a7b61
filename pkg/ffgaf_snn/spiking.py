"""
The frozen integrate-and-fire layer and the activations shaping its drive.

Nothing in this module is trainable and no gradient flows through :func:`if_forward`, blocks treat it as a black box.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from ffgaf_snn.exceptions import ConfigError, DegenerateInputWarning, ShapeError
from ffgaf_snn.numerics import Tensor

__all__ = ['SpikingLayer', 'QuantActParams', 'IFResult', 'regularize', 'quantized_relu', 'quantized_relu_backward',
           'if_simulate', 'if_forward', 'conversion_error', 'rate_decode', 'REGULARIZE_EPSILON']

REGULARIZE_EPSILON = 1e-8


@dataclass(frozen=True)
class SpikingLayer:
    thresh: float = 1.0
    horizon: int = 10
    initial_charge_frac: float = 0.5

    def __post_init__(self):
        if self.thresh <= 0:
            raise ConfigError(f'thresh must be positive, got {self.thresh}')
        if self.horizon < 1:
            raise ConfigError(f'horizon must be at least 1, got {self.horizon}')
        if not 0 <= self.initial_charge_frac < 1:
            raise ConfigError(f'initial_charge_frac must lie in [0, 1), got {self.initial_charge_frac}')


@dataclass(frozen=True)
class QuantActParams:
    lam: float = 1.0
    levels: int = 10
    shift_phi: float = 0.5

    def __post_init__(self):
        if self.lam <= 0:
            raise ConfigError(f'lambda must be positive, got {self.lam}')
        if self.levels < 1:
            raise ConfigError(f'levels must be at least 1, got {self.levels}')

    @classmethod
    def matching(cls, layer: SpikingLayer) -> QuantActParams:
        """
        :return: the activation whose levels are exactly the rates the layer can express
        """
        return cls(lam=layer.thresh, levels=layer.horizon, shift_phi=layer.initial_charge_frac)


class IFResult(NamedTuple):
    spikes: Tensor
    v_initial: Tensor
    v_final: Tensor


def regularize(x: Tensor, thresh: float) -> Tensor:
    """
    Standardize x with its global mean and population std, then scale by thresh.
    A constant x maps to zeros and issues a DegenerateInputWarning.
    """
    if x.size < 2:
        raise ShapeError(f'regularize needs at least 2 elements, got {x.size}')
    mu = x.mean()
    sigma = x.std()
    if sigma == 0:
        warnings.warn('regularize received a constant tensor', DegenerateInputWarning, stacklevel=2)
    return thresh * (x - mu) / max(sigma, REGULARIZE_EPSILON)


def quantized_relu(z: Tensor, q: QuantActParams) -> Tensor:
    """
    lam * clip(floor(z * L / lam + phi) / L, 0, 1), values lie in {0, lam/L, ..., lam}
    """
    levels = np.floor(z * (q.levels / q.lam) + q.shift_phi)
    return q.lam * np.clip(levels / q.levels, 0, 1)


def quantized_relu_backward(z: Tensor, q: QuantActParams, grad_out: Tensor) -> Tensor:
    """
    Straight-through gradient of quantized_relu: identity where 0 < z < lam, zero elsewhere.
    """
    return np.where((z > 0) & (z < q.lam), grad_out, 0).astype(grad_out.dtype, copy=False)


def if_simulate(drive: Tensor, layer: SpikingLayer) -> IFResult:
    """
    Run the integrate-and-fire dynamics with subtraction reset.

    The membrane is tracked in units of the threshold: the charge position after step t is
    initial_charge_frac + (drive accumulated so far) / thresh, and the spike count is an integer that only advances
    when the position reaches the next whole level. For a constant drive the position after t steps is computed
    as drive * (t / thresh) + initial_charge_frac, the same expression quantized_relu floors, so the spike counts
    equal the quantized levels exactly.
    :param drive: either a T×N×C×H×W per-step drive, or an N×C×H×W drive repeated at every step
    :param layer: the spiking layer
    :return: binary spikes of shape T×N×C×H×W, and the membrane potential before the first and after the last step
    """
    if drive.ndim == 5:
        if drive.shape[0] != layer.horizon:
            raise ShapeError(f'time dimension T={drive.shape[0]} does not match horizon {layer.horizon}')
        accumulated = np.cumsum(drive, axis=0)
        frame_shape = drive.shape[1:]
    elif drive.ndim == 4:
        accumulated = None
        frame_shape = drive.shape
    else:
        raise ShapeError(f'drive must be N×C×H×W or T×N×C×H×W, got {drive.ndim} dimensions')

    phi = layer.initial_charge_frac
    v_initial = np.full(frame_shape, phi * layer.thresh, dtype=drive.dtype)
    spikes = np.empty((layer.horizon,) + frame_shape, dtype=drive.dtype)
    count = np.zeros(frame_shape, dtype=np.int64)
    position = np.full(frame_shape, phi, dtype=drive.dtype)
    for t in range(1, layer.horizon + 1):
        if accumulated is None:
            position = drive * (t / layer.thresh) + phi
        else:
            position = accumulated[t - 1] / layer.thresh + phi
        fired = position >= count + 1
        count += fired
        spikes[t - 1] = fired
    v_final = (layer.thresh * (position - count)).astype(drive.dtype, copy=False)
    return IFResult(spikes, v_initial, v_final)


def if_forward(drive: Tensor, layer: SpikingLayer) -> Tensor:
    """
    :return: the binary spike train (T×N×C×H×W) emitted by the layer for the drive
    """
    return if_simulate(drive, layer).spikes


def conversion_error(v_final: Tensor, v_initial: Tensor) -> Tensor:
    """
    The residual potential left over after T steps, ideally zero
    """
    if v_final.shape != v_initial.shape:
        raise ShapeError(f'potential shapes differ: {v_final.shape} vs {v_initial.shape}')
    return v_final - v_initial


def rate_decode(spikes: Tensor, lam: float) -> Tensor:
    """
    :return: lam · (spike count / T), of shape N×C×H×W, evaluated the way quantized_relu maps levels to values
    """
    if spikes.ndim != 5:
        raise ShapeError(f'spikes must be T×N×C×H×W, got {spikes.ndim} dimensions')
    return lam * np.clip(spikes.sum(axis=0) / spikes.shape[0], 0, 1)
