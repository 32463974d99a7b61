from copy import deepcopy

import numpy as np
from pytest import approx, fixture, mark, raises, warns

from ffgaf_snn.allocation import Allocation, AllocationStrategy
from ffgaf_snn.blocks import (EPSILON_G, BlockKind, BlockOptions, GoodnessDivisor, LossMode, Network, TrainingBlock,
                              block_gradients, block_train_step, build_network, encoder_features, encoding_forward,
                              fit, goodness, goodness_backward, hidden_forward, local_loss, network_forward, predict)
from ffgaf_snn.config import ExperimentConfig
from ffgaf_snn.data import synthetic_classes
from ffgaf_snn.exceptions import ConfigError, DataError, DegenerateInputWarning, ShapeError
from ffgaf_snn.numerics import ConvParams, NormMode, NormParams, conv2d, normalize, relu
from ffgaf_snn.spiking import QuantActParams, SpikingLayer
from tests.util import numeric_grad, rel_error

PARAMS = (('conv', 'kernels'), ('conv', 'bias'), ('conv', 'channel_weight'), ('norm', 'gamma'), ('norm', 'beta'))


def make_block(kind: BlockKind, c_in: int, alloc, seed: int = 0, horizon: int = 3, stride: int = 1) -> TrainingBlock:
    rng = np.random.default_rng(seed)
    c_out = sum(alloc)
    conv = ConvParams.init(c_in, c_out, rng, 3, stride, 1, np.float64)
    conv.bias[:] = rng.normal(scale=0.1, size=c_out)
    conv.channel_weight[:] = rng.uniform(0.5, 1.5, size=c_out)
    mode = NormMode.batch if kind is BlockKind.encoding else NormMode.temporal
    norm = NormParams.init(c_out, mode, dtype=np.float64)
    norm.gamma[:] = rng.uniform(0.5, 1.5, size=c_out)
    norm.beta[:] = rng.normal(scale=0.1, size=c_out)
    spiking = SpikingLayer(horizon=horizon)
    return TrainingBlock(conv, norm, Allocation(tuple(alloc), c_out), kind, spiking, QuantActParams.matching(spiking))


def random_spikes(rng, shape):
    return (rng.random(shape) < 0.3).astype(np.float64)


@fixture
def tiny_config():
    return ExperimentConfig(arch=(4, 8), strides=(1, 2), horizon=4, synthetic_classes=2, synthetic_per_class=20,
                            synthetic_shape=(1, 6, 6), epochs=2, batch_size=16, record_time=False, dtype='float64')


def tiny_data(config: ExperimentConfig, separation: float = 5.0):
    return synthetic_classes(config.synthetic_classes, config.synthetic_per_class, config.synthetic_shape,
                             separation, config.seed, dtype=np.dtype(config.dtype))


def test_encoding_zero_input():
    b = make_block(BlockKind.encoding, 1, (2, 2))
    b.conv.bias[:] = 0
    b.norm.beta[:] = 0
    y, _ = encoding_forward(np.zeros((2, 1, 4, 4)), b, True)
    assert not y.any()


def test_encoding_composition():
    rng = np.random.default_rng(0)
    b = make_block(BlockKind.encoding, 2, (1, 2), seed=1)
    x = rng.normal(size=(3, 2, 5, 5))
    expected = relu(normalize(conv2d(x, b.conv), deepcopy(b.norm), True))
    y, _ = encoding_forward(x, b, True)
    assert np.array_equal(y, expected)
    assert y.min() >= 0


def test_hidden_zero_spikes():
    b = make_block(BlockKind.hidden, 2, (2, 2))
    b.conv.bias[:] = 0
    b.norm.beta[:] = 0
    y, per_step, _ = hidden_forward(np.zeros((3, 2, 2, 4, 4)), b, True)
    assert not y.any()
    assert per_step.shape == (3, 2, 4, 4, 4)


def test_hidden_matches_step_loop():
    rng = np.random.default_rng(2)
    b = make_block(BlockKind.hidden, 3, (2, 1), seed=2, stride=2)
    spikes = random_spikes(rng, (3, 2, 3, 6, 6))
    steps = np.stack([conv2d(s, b.conv) for s in spikes])
    per_step_expected = normalize(steps, deepcopy(b.norm), True)
    y, per_step, _ = hidden_forward(spikes, b, True)
    assert per_step == approx(per_step_expected, abs=1e-12)
    assert y == approx(relu(per_step_expected.sum(axis=0)), abs=1e-12)


def test_hidden_single_step_is_encoding():
    rng = np.random.default_rng(3)
    hidden = make_block(BlockKind.hidden, 2, (1, 1), seed=3, horizon=1)
    encoding = TrainingBlock(deepcopy(hidden.conv), NormParams(hidden.norm.gamma.copy(), hidden.norm.beta.copy(),
                                                                hidden.norm.running_mean.copy(),
                                                                hidden.norm.running_var.copy(), NormMode.batch),
                             hidden.allocation, BlockKind.encoding, hidden.spiking, hidden.quant)
    x = random_spikes(rng, (4, 2, 5, 5))
    y_hidden, _, _ = hidden_forward(x[None], hidden, True)
    y_encoding, _ = encoding_forward(x, encoding, True)
    assert y_hidden == approx(y_encoding, abs=1e-12)


def test_hidden_needs_time_axis():
    with raises(ShapeError):
        hidden_forward(np.zeros((2, 2, 4, 4)), make_block(BlockKind.hidden, 2, (1, 1)), True)


def test_goodness_zero():
    assert np.all(goodness(np.zeros((3, 4, 2, 2)), Allocation((1, 3), 4)) == EPSILON_G)


def test_goodness_ones():
    assert goodness(np.ones((2, 3, 2, 2)), Allocation((3,), 3)).tolist() == [[1], [1]]


def test_goodness_hand():
    y = np.array([2.0, 3.0]).reshape(1, 2, 1, 1)
    assert goodness(y, Allocation((1, 1), 2)).tolist() == [[4, 9]]


def test_goodness_time_divisor():
    y = np.ones((4, 1, 2, 1, 1))
    assert goodness(y, Allocation((1, 1), 2)).tolist() == [[1, 1]]
    assert goodness(y, Allocation((1, 1), 2), GoodnessDivisor.literal).tolist() == [[4, 4]]
    summed = y.sum(axis=0)
    assert goodness(summed, Allocation((1, 1), 2), steps=4).tolist() == [[4, 4]]
    assert goodness(summed, Allocation((1, 1), 2), GoodnessDivisor.literal, steps=4).tolist() == [[16, 16]]


def test_goodness_shape_mismatch():
    with raises(ShapeError):
        goodness(np.ones((1, 3, 2, 2)), Allocation((1, 1), 2))


@mark.parametrize('divisor', list(GoodnessDivisor))
def test_goodness_backward_finite_differences(divisor):
    rng = np.random.default_rng(0)
    alloc = Allocation((2, 1, 3), 6)
    for shape in ((3, 6, 2, 2), (2, 3, 6, 2, 2)):
        y = rng.normal(size=shape)
        w = rng.normal(size=(shape[-4], 3))

        def f():
            return float((goodness(y, alloc, divisor, steps=3) * w).sum())

        analytic = goodness_backward(y, alloc, w, divisor, steps=3)
        assert rel_error(analytic, numeric_grad(f, y)) <= 1e-4


def test_literal_loss_zero():
    loss, _ = local_loss(np.ones((3, 2)), np.array([0, 1, 1]), LossMode.literal)
    assert loss == 0


def test_softmax_loss_uniform():
    loss, _ = local_loss(np.full((4, 2), 0.3), np.array([0, 1, 0, 1]))
    assert loss == approx(np.log(2))


def test_loss_bad_label():
    with raises(DataError):
        local_loss(np.ones((2, 2)), np.array([0, 2]))


def test_loss_floors_goodness():
    loss, grad = local_loss(np.zeros((2, 2)), np.array([0, 1]), LossMode.literal)
    assert np.isfinite(loss)
    assert np.all(np.isfinite(grad))


@mark.parametrize('mode', list(LossMode))
@mark.parametrize('seed', range(10))
def test_loss_finite_differences(mode, seed):
    rng = np.random.default_rng(seed)
    g = rng.uniform(0.1, 3, size=(5, 4))
    labels = rng.integers(0, 4, size=5)
    _, grad = local_loss(g, labels, mode)
    assert rel_error(grad, numeric_grad(lambda: local_loss(g, labels, mode)[0], g)) <= 1e-4


def test_softmax_grad_rows_tangent():
    rng = np.random.default_rng(0)
    g = rng.uniform(1e-3, 10, size=(16, 5))
    _, grad = local_loss(g, rng.integers(0, 5, size=16))
    assert np.abs((grad * g).sum(axis=1)).max() <= 1e-10


def block_fd_error(b: TrainingBlock, inputs, labels, options=BlockOptions()) -> float:
    analytic = block_gradients(inputs, labels, b, options).grads
    numeric = []
    for part, name in PARAMS:
        param = getattr(getattr(b, part), name)
        numeric.append(numeric_grad(lambda: block_gradients(inputs, labels, b, options).loss, param).ravel())
    flat = np.concatenate([getattr(analytic, name).ravel() for _, name in PARAMS])
    # the reported softmax loss is a batch mean, the update differentiates the batch sum
    scale = len(labels) if options.batch_sum_update and options.loss_mode is LossMode.softmax else 1
    return rel_error(flat, scale * np.concatenate(numeric))


OPTIONS = [BlockOptions(), BlockOptions(LossMode.literal, GoodnessDivisor.literal),
           BlockOptions(channel_weighting=False), BlockOptions(batch_sum_update=False)]


@mark.parametrize('seed', range(50))
def test_encoding_block_finite_differences(seed):
    rng = np.random.default_rng(seed)
    b = make_block(BlockKind.encoding, 1, (1, 2, 1), seed=seed)
    x = rng.normal(size=(4, 1, 4, 4))
    labels = rng.integers(0, 3, size=4)
    assert block_fd_error(b, x, labels, OPTIONS[seed % len(OPTIONS)]) <= 1e-3


@mark.parametrize('seed', range(50))
def test_hidden_block_finite_differences(seed):
    rng = np.random.default_rng(seed)
    b = make_block(BlockKind.hidden, 2, (2, 2), seed=seed, stride=1 + seed % 2)
    spikes = random_spikes(rng, (3, 4, 2, 4, 4))
    labels = rng.integers(0, 2, size=4)
    assert block_fd_error(b, spikes, labels, OPTIONS[seed % len(OPTIONS)]) <= 1e-3


def test_batch_sum_update_scales_gradients():
    rng = np.random.default_rng(3)
    b = make_block(BlockKind.encoding, 1, (2, 2), seed=3)
    x = rng.normal(size=(5, 1, 4, 4))
    labels = np.array([0, 1, 1, 0, 1])
    summed = block_gradients(x, labels, b)
    mean = block_gradients(x, labels, b, BlockOptions(batch_sum_update=False))
    assert summed.loss == mean.loss
    for _, name in PARAMS:
        assert getattr(summed.grads, name) == approx(5 * getattr(mean.grads, name), rel=1e-12, abs=1e-14)


def small_network(seed: int = 0) -> Network:
    first = make_block(BlockKind.encoding, 1, (2, 2), seed=seed)
    second = make_block(BlockKind.hidden, 4, (3, 3), seed=seed + 1, stride=2)
    return Network([first, second], classes=2, horizon=3)


def test_no_cross_block_gradient():
    rng = np.random.default_rng(0)
    net = small_network()
    x = rng.normal(size=(4, 1, 6, 6))
    labels = np.array([0, 1, 0, 1])
    before = block_gradients(x, labels, net.blocks[0]).grads
    for _, name in PARAMS[:2]:
        getattr(net.blocks[1].conv, name)[...] += rng.normal(size=getattr(net.blocks[1].conv, name).shape)
    net.blocks[1].norm.gamma *= 3
    after = block_gradients(x, labels, net.blocks[0]).grads
    for _, name in PARAMS:
        assert np.array_equal(getattr(before, name), getattr(after, name))


def test_allocation_permutation_consistency():
    rng = np.random.default_rng(0)
    b = make_block(BlockKind.encoding, 1, (1, 3), seed=4)
    x = rng.normal(size=(6, 1, 4, 4))
    labels = rng.integers(0, 2, size=6)
    original = block_gradients(x, labels, deepcopy(b)).loss
    # the three channels of class 1 move to the front and become class 0
    order = [1, 2, 3, 0]
    swapped = TrainingBlock(
        ConvParams(b.conv.kernels[order], b.conv.bias[order], b.conv.channel_weight[order], b.conv.stride,
                   b.conv.padding),
        NormParams(*(a[order] for a in (b.norm.gamma, b.norm.beta, b.norm.running_mean, b.norm.running_var))),
        Allocation((3, 1), 4), BlockKind.encoding, b.spiking, b.quant)
    assert block_gradients(x, 1 - labels, swapped).loss == approx(original, abs=1e-12)


def test_lr_zero_leaves_parameters():
    rng = np.random.default_rng(0)
    b = make_block(BlockKind.encoding, 1, (2, 2))
    before = deepcopy(b)
    step = block_train_step(rng.normal(size=(4, 1, 4, 4)), np.array([0, 1, 1, 0]), b, 0.0)
    for part, name in PARAMS:
        assert np.array_equal(getattr(getattr(b, part), name), getattr(getattr(before, part), name))
    assert 0 <= step.accuracy <= 1


@mark.parametrize('seed', range(20))
def test_step_decreases_loss(seed):
    d = synthetic_classes(2, 8, (1, 6, 6), separation=5.0, seed=seed, dtype=np.float64)
    b = make_block(BlockKind.encoding, 1, (2, 2), seed=seed)
    before = block_gradients(d.images, d.labels, b).loss
    block_train_step(d.images, d.labels, b, 1e-3)
    assert block_gradients(d.images, d.labels, b).loss < before


def test_channel_weighting_off_freezes_weights():
    rng = np.random.default_rng(0)
    b = make_block(BlockKind.encoding, 1, (2, 2))
    weights = b.conv.channel_weight.copy()
    kernels = b.conv.kernels.copy()
    block_train_step(rng.normal(size=(4, 1, 4, 4)), np.array([0, 1, 1, 0]), b, 0.1,
                     BlockOptions(channel_weighting=False))
    assert np.array_equal(b.conv.channel_weight, weights)
    assert not np.array_equal(b.conv.kernels, kernels)


def test_quant_in_loss_step():
    rng = np.random.default_rng(0)
    b = make_block(BlockKind.hidden, 2, (2, 2))
    step = block_train_step(random_spikes(rng, (3, 4, 2, 4, 4)), np.array([0, 1, 1, 0]), b, 0.01,
                            BlockOptions(quant_in_loss=True))
    assert np.isfinite(step.loss)
    assert step.per_step.shape == (3, 4, 4, 4, 4)


def test_network_forward_deterministic_and_binary():
    rng = np.random.default_rng(0)
    net = small_network()
    x = rng.normal(size=(5, 1, 6, 6))
    first = network_forward(x, net)
    second = network_forward(x, net)
    for a, b in zip(first.goodness, second.goodness):
        assert np.array_equal(a, b)
    assert np.array_equal(first.spikes, second.spikes)
    assert first.spikes.shape == (3, 5, 6, 3, 3)
    assert set(np.unique(first.spikes)) <= {0.0, 1.0}
    assert len(first.spike_rates) == 2
    assert all(0 <= r <= 1 for r in first.spike_rates)
    assert all(g.min() >= EPSILON_G for g in first.goodness)


def test_network_degenerate_prediction(tiny_config):
    net = build_network(tiny_config, 1, np.zeros(2))
    for block in net.blocks:
        block.conv.kernels[...] = 0
        block.conv.bias[...] = 1
    x = np.random.default_rng(0).normal(size=(6, 1, 6, 6))
    with warns(DegenerateInputWarning):
        trace = network_forward(x, net)
    for g in trace.goodness:
        assert np.all(g == g[:, :1])
    with warns(DegenerateInputWarning):
        assert not predict(x, net).any()


def test_prediction_invariant_to_goodness_scale():
    rng = np.random.default_rng(1)
    net = small_network(3)
    x = rng.normal(size=(8, 1, 6, 6))
    base = network_forward(x, net)
    scaled = deepcopy(net)
    for block in scaled.blocks:
        block.norm.gamma *= 2
        block.norm.beta *= 2
    trace = network_forward(x, scaled)
    for g, g_scaled in zip(base.goodness, trace.goodness):
        assert g_scaled == approx(4 * g, rel=1e-12)
    assert np.array_equal(predict(x, net), predict(x, scaled))


def test_single_block_vote():
    rng = np.random.default_rng(2)
    net = small_network(5)
    x = rng.normal(size=(8, 1, 6, 6))
    trace = network_forward(x, net)
    only_last = Network(net.blocks, 2, 3, (0.0, 1.0))
    assert np.array_equal(predict(x, only_last), trace.goodness[1].argmax(axis=1))


def test_network_validation():
    first = make_block(BlockKind.encoding, 1, (2, 2))
    hidden = make_block(BlockKind.hidden, 4, (1, 1))
    with raises(ConfigError):
        Network([hidden], 2, 3)
    with raises(ConfigError):
        Network([first, make_block(BlockKind.hidden, 3, (2, 2))], 2, 3)
    with raises(ConfigError):
        Network([first], 2, 3, (1.0, 1.0))
    with raises(ConfigError):
        Network([first], 2, 5)
    with raises(ConfigError):
        TrainingBlock(first.conv, first.norm, Allocation((1, 2), 3), first.kind, first.spiking, first.quant)


def test_build_network(tiny_config):
    config = tiny_config.replace(exclude_encoding_from_vote=True, temporal_gamma0=0.5)
    net = build_network(config, 1, np.array([1.0, -1.0]))
    assert [b.conv.c_out for b in net.blocks] == [4, 8]
    assert [b.kind for b in net.blocks] == [BlockKind.encoding, BlockKind.hidden]
    assert net.aggregation_weights == (0.0, 1.0)
    assert net.blocks[1].norm.gamma.tolist() == [0.5] * 8
    assert net.blocks[1].conv.stride == 2
    assert net.blocks[1].allocation.channels_per_class[0] > net.blocks[1].allocation.channels_per_class[1]
    assert net.blocks[0].conv.kernels.dtype == np.float64
    uniform = build_network(config, 1, np.array([1.0, -1.0]), AllocationStrategy.uniform)
    assert uniform.blocks[1].allocation.channels_per_class == (4, 4)
    again = build_network(config, 1, np.array([1.0, -1.0]))
    assert np.array_equal(again.blocks[1].conv.kernels, net.blocks[1].conv.kernels)


def test_fit_zero_epochs(tiny_config):
    config = tiny_config.replace(epochs=0)
    net = build_network(config, 1, np.zeros(2))
    before = deepcopy(net)
    assert fit(tiny_data(config), net, config) == []
    for b, b0 in zip(net.blocks, before.blocks):
        assert np.array_equal(b.conv.kernels, b0.conv.kernels)


def test_fit_deterministic(tiny_config):
    histories = []
    for _ in range(2):
        net = build_network(tiny_config, 1, np.zeros(2))
        histories.append(fit(tiny_data(tiny_config), net, tiny_config))
    assert histories[0] == histories[1]
    assert len(histories[0]) == 2
    record = histories[0][-1]
    assert record.epoch == 2
    assert record.seconds == 0.0
    assert len(record.block_losses) == len(record.spike_rates) == 2


def test_fit_reports_epochs(tiny_config):
    seen = []
    net = build_network(tiny_config, 1, np.zeros(2))
    history = fit(tiny_data(tiny_config), net, tiny_config, seen.append)
    assert seen == history


def test_tiny_network_learns(tiny_config):
    config = tiny_config.replace(epochs=20, synthetic_per_class=40, batch_size=20)
    d = tiny_data(config, separation=10.0)
    net = build_network(config, 1, np.zeros(2))
    history = fit(d, net, config)
    assert history[-1].block_losses[0] < history[0].block_losses[0]
    assert np.array_equal(predict(d.images, net), d.labels)


def test_default_settings_learn_synthetic():
    config = ExperimentConfig(synthetic_per_class=100, batch_size=32, record_time=False)
    d = synthetic_classes(config.synthetic_classes, config.synthetic_per_class, config.synthetic_shape,
                          config.synthetic_separation, config.seed)
    net = build_network(config, 1, np.zeros(config.synthetic_classes))
    history = fit(d, net, config)
    assert history[-1].block_losses[0] < history[0].block_losses[0]
    assert np.mean(predict(d.images, net) == d.labels) >= 0.7


def test_encoder_features(tiny_config):
    net = build_network(tiny_config, 1, np.zeros(2))
    d = tiny_data(tiny_config)
    features = encoder_features(d.images, net, batch_size=7)
    assert features.shape == (len(d), 4)
    assert features.min() >= 0
