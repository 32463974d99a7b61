"""
Layer-local training blocks and the network pipeline built from them.

Each block owns a convolution, a normalization and a goodness head whose channels are partitioned among the classes.
A block is trained only from its own loss, its input is treated as a constant and the spiking layer that follows it
is frozen, so no gradient ever crosses a block boundary.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from enum import Enum, auto
from typing import TYPE_CHECKING, Callable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from ffgaf_snn.allocation import Allocation, AllocationStrategy, allocate
from ffgaf_snn.architecture import ArchDescriptor
from ffgaf_snn.data import Dataset, batches
from ffgaf_snn.exceptions import ConfigError, DataError, ShapeError
from ffgaf_snn.numerics import (ConvParams, NormMode, NormParams, Tensor, _conv2d_backward_cached, _conv2d_cached,
                                _ConvCache, check_finite, normalize, normalize_backward, relu, relu_backward)
from ffgaf_snn.spiking import (IFResult, QuantActParams, SpikingLayer, conversion_error, if_simulate, quantized_relu,
                               quantized_relu_backward, regularize)

if TYPE_CHECKING:
    from ffgaf_snn.config import ExperimentConfig

__all__ = ['BlockKind', 'LossMode', 'GoodnessDivisor', 'BlockOptions', 'TrainingBlock', 'GoodnessMatrix', 'Network',
           'BlockGrads', 'BlockStep', 'NetworkTrace', 'EpochRecord', 'EPSILON_G', 'encoding_forward',
           'hidden_forward', 'goodness', 'goodness_backward', 'local_loss', 'block_gradients', 'block_train_step',
           'emit_spikes', 'network_forward', 'predict', 'fit', 'build_network', 'encoder_features']

logger = logging.getLogger(__name__)

EPSILON_G = 1e-12

GoodnessMatrix = np.ndarray
"""
N×K matrix of per-class goodness, floored at EPSILON_G
"""


class BlockKind(Enum):
    encoding = auto()
    """
    Consumes images, batch normalization
    """
    hidden = auto()
    """
    Consumes spike trains, temporal normalization
    """


class LossMode(Enum):
    softmax = auto()
    """
    Cross entropy of a softmax over log-goodness, classes compete for goodness
    """
    literal = auto()
    """
    Negative log-goodness of the true class, summed over the batch
    """


class GoodnessDivisor(Enum):
    mean_with_T = auto()
    """
    Goodness is a proper mean over allocated channels, time steps and positions
    """
    literal = auto()
    """
    The time axis is summed, not averaged
    """


@dataclass(frozen=True)
class BlockOptions:
    loss_mode: LossMode = LossMode.softmax
    divisor: GoodnessDivisor = GoodnessDivisor.mean_with_T
    quant_in_loss: bool = False
    channel_weighting: bool = True
    batch_sum_update: bool = True
    """
    Differentiate the batch-summed softmax loss, the reported loss stays a per-sample mean
    """


@dataclass
class TrainingBlock:
    conv: ConvParams
    norm: NormParams
    allocation: Allocation
    kind: BlockKind
    spiking: SpikingLayer
    quant: QuantActParams

    def __post_init__(self):
        if self.allocation.total != self.conv.c_out:
            raise ConfigError(f'allocation covers {self.allocation.total} channels, the block has {self.conv.c_out}')
        if self.norm.channels != self.conv.c_out:
            raise ConfigError(f'normalization covers {self.norm.channels} channels, the block has {self.conv.c_out}')
        expected = NormMode.batch if self.kind is BlockKind.encoding else NormMode.temporal
        if self.norm.mode is not expected:
            raise ConfigError(f'{self.kind.name} blocks need {expected.name} normalization')


@dataclass
class Network:
    blocks: List[TrainingBlock]
    classes: int
    horizon: int
    aggregation_weights: Tuple[float, ...] = ()
    descriptor: Optional[ArchDescriptor] = None

    def __post_init__(self):
        if not self.blocks:
            raise ConfigError('a network needs at least one block')
        if not self.aggregation_weights:
            self.aggregation_weights = (1.0,) * len(self.blocks)
        if len(self.aggregation_weights) != len(self.blocks):
            raise ConfigError(f'{len(self.blocks)} blocks need as many aggregation weights')
        for i, block in enumerate(self.blocks):
            if block.allocation.classes != self.classes:
                raise ConfigError(f'block {i} is allocated for {block.allocation.classes} classes, not {self.classes}')
            if block.spiking.horizon != self.horizon:
                raise ConfigError(f'block {i} spikes over {block.spiking.horizon} steps, not {self.horizon}')
            if (block.kind is BlockKind.encoding) != (i == 0):
                raise ConfigError('the first block, and only the first block, must be an encoding block')
        for i, (prev, nxt) in enumerate(zip(self.blocks, self.blocks[1:])):
            if prev.conv.c_out != nxt.conv.c_in:
                raise ConfigError(f'block {i} emits {prev.conv.c_out} channels, block {i + 1} expects {nxt.conv.c_in}')


class _BlockCache(NamedTuple):
    conv: _ConvCache
    pre_norm: Tensor
    pre_act: Tensor


def _activate(a: Tensor, block: TrainingBlock, options: BlockOptions) -> Tensor:
    if options.quant_in_loss:
        return quantized_relu(a, block.quant)
    return relu(a)


def _activate_backward(a: Tensor, block: TrainingBlock, options: BlockOptions, grad_out: Tensor) -> Tensor:
    if options.quant_in_loss:
        return quantized_relu_backward(a, block.quant, grad_out)
    return relu_backward(a, grad_out)


def encoding_forward(x: Tensor, b: TrainingBlock, training: bool,
                     options: BlockOptions = BlockOptions()) -> Tuple[Tensor, _BlockCache]:
    """
    y = relu(normalize(conv2d(x)))
    :param x: images of shape N×C_in×H×W
    :return: the activation and the intermediates needed to differentiate it
    """
    conv_out, conv_cache = _conv2d_cached(x, b.conv)
    a = normalize(conv_out, b.norm, training)
    return _activate(a, b, options), _BlockCache(conv_cache, conv_out, a)


def hidden_forward(spikes: Tensor, b: TrainingBlock, training: bool,
                   options: BlockOptions = BlockOptions()) -> Tuple[Tensor, Tensor, _BlockCache]:
    """
    The same convolution is applied at every step, the steps are normalized jointly and summed before the activation.
    :param spikes: a spike train of shape T×N×C_in×H×W
    :return: the activation (N×C×H'×W'), the normalized per-step pre-activations (T×N×C×H'×W') and the cache
    """
    if spikes.ndim != 5:
        raise ShapeError(f'hidden blocks consume T×N×C×H×W spike trains, got {spikes.ndim} dimensions')
    t, n = spikes.shape[:2]
    conv_out, conv_cache = _conv2d_cached(spikes.reshape((t * n,) + spikes.shape[2:]), b.conv)
    conv_out = conv_out.reshape((t, n) + conv_out.shape[1:])
    per_step = normalize(conv_out, b.norm, training)
    summed = per_step.sum(axis=0)
    return _activate(summed, b, options), per_step, _BlockCache(conv_cache, conv_out, summed)


def _goodness_terms(y: Tensor, alloc: Allocation, divisor: GoodnessDivisor,
                    steps: int = 1) -> Tuple[Tensor, Tensor]:
    channel_axis = y.ndim - 3
    if y.ndim not in (4, 5):
        raise ShapeError(f'goodness expects N×C×H×W or T×N×C×H×W, got {y.ndim} dimensions')
    if y.shape[channel_axis] != alloc.total:
        raise ShapeError(f'channel dimension C={y.shape[channel_axis]} does not match allocation of {alloc.total}')
    squares = np.square(y)
    if y.ndim == 5:
        per_channel = squares.sum(axis=(0, 3, 4))
        steps = y.shape[0]
    else:
        per_channel = squares.sum(axis=(2, 3))
    if divisor is GoodnessDivisor.literal:
        steps = 1
    starts = [start for start, _ in alloc.bounds()]
    counts = np.asarray(alloc.channels_per_class) * (steps * y.shape[-2] * y.shape[-1])
    return np.add.reduceat(per_channel, starts, axis=1) / counts, counts


def goodness(y: Tensor, alloc: Allocation, divisor: GoodnessDivisor = GoodnessDivisor.mean_with_T,
             steps: int = 1) -> GoodnessMatrix:
    """
    G[n, j] is the mean of y² over the channels allocated to class j (and over time, if y has a time axis)
    :param steps: the number of time steps a 4-D y was summed over, divided out unless divisor is literal
    """
    raw, _ = _goodness_terms(y, alloc, divisor, steps)
    return np.maximum(raw, EPSILON_G)


def goodness_backward(y: Tensor, alloc: Allocation, grad_g: Tensor,
                      divisor: GoodnessDivisor = GoodnessDivisor.mean_with_T, steps: int = 1) -> Tensor:
    raw, counts = _goodness_terms(y, alloc, divisor, steps)
    # floored entries are constant in y
    scale = np.where(raw > EPSILON_G, grad_g, 0) / counts
    per_channel = scale[:, alloc.owner()]
    view = per_channel[:, :, None, None]
    if y.ndim == 5:
        view = view[None]
    return (2 * y * view).astype(y.dtype, copy=False)


def local_loss(g: GoodnessMatrix, labels: np.ndarray,
               mode: LossMode = LossMode.softmax) -> Tuple[float, Tensor]:
    """
    :param g: the goodness matrix of a batch
    :param labels: the true class of every sample
    :param mode: softmax (batch mean of cross entropy over log-goodness) or literal (summed -log G of the true class)
    :return: the loss and its gradient with respect to g
    :raises DataError: if a label is out of range
    """
    labels = np.asarray(labels)
    n, k = g.shape
    if labels.shape != (n,):
        raise ShapeError(f'expected {n} labels, got shape {labels.shape}')
    if n and (labels.min() < 0 or labels.max() >= k):
        raise DataError(f'labels must lie in [0, {k})')
    g = np.maximum(g, EPSILON_G)
    rows = np.arange(n)
    if mode is LossMode.literal:
        loss = -np.log(g[rows, labels]).sum()
        grad = np.zeros_like(g)
        grad[rows, labels] = -1.0 / g[rows, labels]
        return float(loss), grad

    logits = np.log(g)
    logits = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(logits).sum(axis=1, keepdims=True))
    log_p = logits - log_z
    loss = -log_p[rows, labels].mean()
    grad_logits = np.exp(log_p)
    grad_logits[rows, labels] -= 1.0
    grad_logits /= n
    return float(loss), grad_logits / g


def _summed_steps(b: TrainingBlock) -> int:
    return 1 if b.kind is BlockKind.encoding else b.spiking.horizon


@dataclass
class BlockGrads:
    kernels: Tensor
    bias: Tensor
    channel_weight: Tensor
    gamma: Tensor
    beta: Tensor


@dataclass
class BlockStep:
    loss: float
    correct: int
    goodness: GoodnessMatrix
    y: Tensor
    per_step: Optional[Tensor] = None
    grads: Optional[BlockGrads] = field(default=None, repr=False)

    @property
    def accuracy(self) -> float:
        return self.correct / len(self.goodness)


def block_gradients(inputs: Tensor, labels: np.ndarray, b: TrainingBlock,
                    options: BlockOptions = BlockOptions()) -> BlockStep:
    """
    Forward a batch through the block in training mode and differentiate the block's own loss with respect to its
    parameters. The inputs are constants, no gradient is computed for them.
    """
    if b.kind is BlockKind.encoding:
        y, cache = encoding_forward(inputs, b, True, options)
        per_step = None
    else:
        y, per_step, cache = hidden_forward(inputs, b, True, options)
    steps = _summed_steps(b)
    g = goodness(y, b.allocation, options.divisor, steps)
    loss, grad_g = local_loss(g, labels, options.loss_mode)
    if options.batch_sum_update and options.loss_mode is LossMode.softmax:
        grad_g = grad_g * len(labels)

    grad_y = goodness_backward(y, b.allocation, grad_g, options.divisor, steps)
    grad_a = _activate_backward(cache.pre_act, b, options, grad_y)
    if b.kind is BlockKind.hidden:
        # every step contributes to the sum with unit weight
        grad_a = np.broadcast_to(grad_a, cache.pre_norm.shape)
    norm_grads = normalize_backward(cache.pre_norm, b.norm, grad_a)
    grad_conv_out = norm_grads.x
    if b.kind is BlockKind.hidden:
        grad_conv_out = grad_conv_out.reshape((-1,) + grad_conv_out.shape[2:])
    conv_grads = _conv2d_backward_cached(cache.conv, b.conv, grad_conv_out, input_grad=False)

    grads = BlockGrads(conv_grads.kernels, conv_grads.bias, conv_grads.channel_weight, norm_grads.gamma,
                       norm_grads.beta)
    correct = int((g.argmax(axis=1) == labels).sum())
    return BlockStep(loss, correct, g, y, per_step, grads)


def block_train_step(inputs: Tensor, labels: np.ndarray, b: TrainingBlock, lr: float,
                     options: BlockOptions = BlockOptions()) -> BlockStep:
    """
    One plain SGD step of the block on its own loss.
    :return: the block-local loss and accuracy, along with the pre-update activations
    :raises NumericError: if the update produces a non-finite parameter
    """
    step = block_gradients(inputs, labels, b, options)
    if lr:
        grads = step.grads
        b.conv.kernels -= lr * grads.kernels
        b.conv.bias -= lr * grads.bias
        if options.channel_weighting:
            b.conv.channel_weight -= lr * grads.channel_weight
        b.norm.gamma -= lr * grads.gamma
        b.norm.beta -= lr * grads.beta
        for name, value in (('kernels', b.conv.kernels), ('bias', b.conv.bias),
                            ('channel weights', b.conv.channel_weight), ('gamma', b.norm.gamma),
                            ('beta', b.norm.beta)):
            check_finite(value, f'{b.kind.name} block {name}')
    return step


def emit_spikes(b: TrainingBlock, y: Tensor, per_step: Optional[Tensor] = None) -> IFResult:
    """
    Drive the block's spiking layer: regularize, quantize, then integrate and fire.
    Hidden blocks drive with their per-step pre-activations, the encoding block with its activation at every step.
    """
    source = y if per_step is None else per_step
    drive = quantized_relu(regularize(source, b.spiking.thresh), b.quant)
    return if_simulate(drive, b.spiking)


@dataclass
class NetworkTrace:
    goodness: List[GoodnessMatrix]
    spikes: Tensor
    spike_rates: List[float]
    conversion_errors: List[float]


def network_forward(x: Tensor, net: Network, training: bool = False,
                    options: BlockOptions = BlockOptions()) -> NetworkTrace:
    """
    Run images through every block and spiking layer, recording each block's goodness.
    """
    trace = NetworkTrace([], x, [], [])
    inputs = x
    for block in net.blocks:
        if block.kind is BlockKind.encoding:
            y, _ = encoding_forward(inputs, block, training, options)
            per_step = None
        else:
            y, per_step, _ = hidden_forward(inputs, block, training, options)
        trace.goodness.append(goodness(y, block.allocation, options.divisor, _summed_steps(block)))
        fired = emit_spikes(block, y, per_step)
        trace.spike_rates.append(float(fired.spikes.mean()))
        trace.conversion_errors.append(float(np.abs(conversion_error(fired.v_final, fired.v_initial)).mean()))
        inputs = fired.spikes
    trace.spikes = inputs
    return trace


def _vote(goodness_list: Sequence[GoodnessMatrix], weights: Sequence[float]) -> Tensor:
    return sum(w * np.log(g) for w, g in zip(weights, goodness_list))


def predict(x: Tensor, net: Network, options: BlockOptions = BlockOptions(),
            batch_size: Optional[int] = None) -> np.ndarray:
    """
    :return: for every sample, the class with the highest weighted sum of log-goodness over the blocks,
        ties go to the lowest class index
    """
    batch_size = batch_size or len(x)
    ret = []
    for start in range(0, len(x), batch_size):
        trace = network_forward(x[start:start + batch_size], net, False, options)
        ret.append(_vote(trace.goodness, net.aggregation_weights).argmax(axis=1))
    return np.concatenate(ret) if ret else np.zeros(0, dtype=np.int64)


@dataclass
class EpochRecord:
    epoch: int
    block_losses: List[float]
    block_accuracies: List[float]
    accuracy: float
    seconds: float
    spike_rates: List[float]


def fit(train_set: Dataset, net: Network, config: ExperimentConfig,
        on_epoch: Optional[Callable[[EpochRecord], None]] = None) -> List[EpochRecord]:
    """
    Train every block of the network layer-locally. Each batch flows through the blocks in order, every block takes
    one step on its own loss and passes its spikes on to the next.
    :param on_epoch: called with each epoch's record as soon as it completes
    :return: one record per epoch
    """
    options = config.block_options()
    history = []
    blocks = len(net.blocks)
    for epoch in range(config.epochs):
        start = time.perf_counter()
        losses = np.zeros(blocks)
        correct = np.zeros(blocks, dtype=np.int64)
        rates = np.zeros(blocks)
        ensemble_correct = 0
        for x, labels in batches(train_set, config.batch_size, shuffle=True, seed=config.seed, epoch=epoch):
            inputs = x
            goodness_list = []
            for i, block in enumerate(net.blocks):
                step = block_train_step(inputs, labels, block, config.lr, options)
                losses[i] += step.loss * len(labels) if options.loss_mode is LossMode.softmax else step.loss
                correct[i] += step.correct
                goodness_list.append(step.goodness)
                spikes = emit_spikes(block, step.y, step.per_step).spikes
                rates[i] += spikes.mean() * len(labels)
                inputs = spikes
                logger.debug('epoch %d block %d batch loss %.6f', epoch + 1, i, step.loss)
            ensemble_correct += int((_vote(goodness_list, net.aggregation_weights).argmax(axis=1) == labels).sum())
        n = len(train_set)
        record = EpochRecord(
            epoch=epoch + 1,
            block_losses=list(losses / n),
            block_accuracies=list(correct / n),
            accuracy=ensemble_correct / n,
            seconds=time.perf_counter() - start if config.record_time else 0.0,
            spike_rates=list(rates / n),
        )
        logger.info('epoch %d: accuracy %.4f, block losses %s', record.epoch, record.accuracy,
                    ', '.join(f'{v:.4f}' for v in record.block_losses))
        history.append(record)
        if on_epoch:
            on_epoch(record)
    return history


def build_network(config: ExperimentConfig, c_in: int, complexity: np.ndarray,
                  strategy: Optional[AllocationStrategy] = None) -> Network:
    """
    Create a freshly initialized network, each block's channels are allocated from the class complexities.
    All randomness is drawn from the config's seed.
    :param strategy: the allocation strategy, defaults to the config's
    """
    descriptor = config.arch_descriptor(c_in)
    rng = np.random.default_rng(config.seed)
    dtype = np.dtype(config.dtype)
    spiking = config.spiking_layer()
    quant = config.quant_params()
    strategy = strategy or config.alloc_strategy
    blocks = []
    for i, ((cin, cout), stride) in enumerate(zip(descriptor.channels(), descriptor.strides)):
        kind = BlockKind.encoding if i == 0 else BlockKind.hidden
        if kind is BlockKind.encoding:
            norm = NormParams.init(cout, NormMode.batch, 1.0, config.norm_momentum, config.norm_eps, dtype)
        else:
            gamma0 = config.thresh if config.temporal_gamma0 is None else config.temporal_gamma0
            norm = NormParams.init(cout, NormMode.temporal, gamma0, config.norm_momentum, config.norm_eps, dtype)
        blocks.append(TrainingBlock(
            conv=ConvParams.init(cin, cout, rng, descriptor.kernel, stride, descriptor.padding, dtype),
            norm=norm,
            allocation=allocate(complexity, cout, config.alloc_phi, strategy),
            kind=kind,
            spiking=spiking,
            quant=quant,
        ))
    weights = [1.0] * len(blocks)
    if config.exclude_encoding_from_vote and len(blocks) > 1:
        weights[0] = 0.0
    return Network(blocks, len(complexity), descriptor.horizon, tuple(weights), descriptor)


def encoder_features(x: Tensor, net: Network, batch_size: Optional[int] = None) -> np.ndarray:
    """
    :return: the encoding block's inference activations, mean-pooled over space, one N×C row per sample
    """
    batch_size = batch_size or len(x)
    block = net.blocks[0]
    ret = []
    for start in range(0, len(x), batch_size):
        y, _ = encoding_forward(x[start:start + batch_size], block, False)
        ret.append(y.mean(axis=(2, 3)))
    return np.concatenate(ret)
