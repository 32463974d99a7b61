"""
Command line entry point: ``ffgaf-snn {analyze, train, eval, ablate, energy}``.

Every subcommand is a :class:`~ffgaf_snn.pipeline.Pipeline` of stages, independent stages (such as the three trainings
of ``ablate``) run concurrently. Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import asyncio
import csv
import io
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ffgaf_snn._version import __version__
from ffgaf_snn.allocation import Allocation, AllocationStrategy, SimilarityReport, allocate, analyze_similarity
from ffgaf_snn.architecture import ArchDescriptor
from ffgaf_snn.blocks import (EpochRecord, GoodnessDivisor, Network, build_network, encoder_features, fit,
                              network_forward, predict)
from ffgaf_snn.checkpoint import Checkpoint, atomic_write, load_checkpoint, save_checkpoint
from ffgaf_snn.config import DatasetName, ExperimentConfig, FeatureSource
from ffgaf_snn.data import ChannelStats, Dataset, load_cifar10, load_idx, standardize, subset, synthetic_classes
from ffgaf_snn.energy import (EnergyConstants, EnergyReport, count_dense_ops, count_ops, estimate_energy,
                              format_table, read_spike_rates, report_csv, write_spike_rates)
from ffgaf_snn.exceptions import ConfigError, DataError, NumericError
from ffgaf_snn.pipeline import Pipeline

__all__ = ['DataPaths', 'PreparedData', 'cmd_analyze', 'cmd_train', 'cmd_eval', 'cmd_ablate', 'cmd_energy',
           'prepare_data', 'prepare_split', 'metrics_header', 'main']

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


@dataclass(frozen=True)
class DataPaths:
    train_images: Optional[Path] = None
    train_labels: Optional[Path] = None
    test_images: Optional[Path] = None
    test_labels: Optional[Path] = None
    cifar_train: Tuple[Path, ...] = ()
    cifar_test: Tuple[Path, ...] = ()


@dataclass
class PreparedData:
    train: Dataset
    test: Optional[Dataset]
    stats: ChannelStats

    @property
    def c_in(self) -> int:
        return self.train.sample_shape[0]


def _load_split(config: ExperimentConfig, paths: DataPaths, split: str) -> Optional[Dataset]:
    dtype = np.dtype(config.dtype)
    if config.dataset is DatasetName.synthetic:
        per_class = config.synthetic_per_class if split == 'train' else max(1, config.synthetic_per_class // 4)
        d = synthetic_classes(config.synthetic_classes, per_class, config.synthetic_shape,
                              config.synthetic_separation, config.seed, config.synthetic_preset, dtype, split)
    elif config.dataset is DatasetName.cifar10:
        files = paths.cifar_train if split == 'train' else paths.cifar_test
        if not files:
            if split == 'test':
                return None
            raise ConfigError('cifar10 needs --cifar-train batch files')
        d = load_cifar10(files, split, dtype)
    else:
        images, labels = ((paths.train_images, paths.train_labels) if split == 'train'
                          else (paths.test_images, paths.test_labels))
        if images is None or labels is None:
            if split == 'test':
                return None
            raise ConfigError(f'{config.dataset.name} needs --train-images and --train-labels')
        d = load_idx(images, labels, config.dataset.name, split, dtype=dtype)
    return subset(d, config.train_limit if split == 'train' else config.test_limit)


def prepare_data(config: ExperimentConfig, paths: DataPaths, stats: Optional[ChannelStats] = None) -> PreparedData:
    """
    Load both splits and standardize them with the train split's statistics (or the given ones)
    """
    train, stats = standardize(_load_split(config, paths, 'train'), stats)
    test = _load_split(config, paths, 'test')
    if test is not None:
        test, _ = standardize(test, stats)
    return PreparedData(train, test, stats)


def prepare_split(config: ExperimentConfig, paths: DataPaths, split: str, stats: ChannelStats) -> Dataset:
    """
    Load only the named split and standardize it with stored statistics
    """
    if split not in ('train', 'test'):
        raise ConfigError(f'unknown split {split!r}')
    try:
        loaded = _load_split(config, paths, split)
    except ConfigError as e:
        raise DataError(f'no {split} data to evaluate on: {e}') from e
    if loaded is None:
        raise DataError(f'no {split} data to evaluate on')
    return standardize(loaded, stats)[0]


def _class_features(data: PreparedData, config: ExperimentConfig) -> np.ndarray:
    images = data.train.images
    if config.feature_source is FeatureSource.raw_pixels:
        return images.reshape(len(images), -1)
    k = data.train.classes
    uniform_net = build_network(config, data.c_in, np.zeros(k), AllocationStrategy.uniform)
    logger.info('training a uniform network to extract encoder features')
    fit(data.train, uniform_net, config)
    return encoder_features(images, uniform_net, config.eval_batch_size)


def _complexity(data: PreparedData, config: ExperimentConfig) -> SimilarityReport:
    return analyze_similarity(_class_features(data, config), data.train.labels, data.train.classes)


def _csv(rows: Sequence[Sequence[Any]]) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator='\n')
    writer.writerows(rows)
    return out.getvalue()


def _fmt(value: float) -> str:
    return repr(float(value))


def _run(pipeline: Pipeline, **kwargs) -> Dict[str, Any]:
    return asyncio.run(pipeline(**kwargs)).kwargs()


@dataclass
class AnalyzeResult:
    report: SimilarityReport
    allocations: List[Allocation]


def cmd_analyze(config: ExperimentConfig, paths: DataPaths, out_dir: Path) -> AnalyzeResult:
    """
    Write the class similarity matrix, the complexity scores and every block's channel allocation as CSV files
    """
    pipeline = Pipeline()

    @pipeline.register
    def data():
        return prepare_data(config, paths)

    @pipeline.register
    def report(data):
        return _complexity(data, config)

    @pipeline.register
    def allocations(report):
        return [allocate(report.complexity, channels, config.alloc_phi, config.alloc_strategy)
                for channels in config.arch]

    @pipeline.register
    def written(report, allocations):
        out_dir.mkdir(parents=True, exist_ok=True)
        k = len(report.complexity)
        atomic_write(out_dir / 'similarity.csv', _csv(
            [['class', *range(k)]] + [[c, *(_fmt(v) for v in row)] for c, row in enumerate(report.matrix)]))
        atomic_write(out_dir / 'complexity.csv', _csv(
            [['class', 'samples', 'complexity']]
            + [[c, int(n), _fmt(s)] for c, (n, s) in enumerate(zip(report.sample_counts, report.complexity))]))
        atomic_write(out_dir / 'allocation.csv', _csv(
            [['block', 'strategy', 'total', *range(k)]]
            + [[i, a.strategy.name, a.total, *a.channels_per_class] for i, a in enumerate(allocations)]))
        logger.info('wrote similarity, complexity and allocation CSV files to %s', out_dir)

    results = _run(pipeline)
    return AnalyzeResult(results['report'], results['allocations'])


def metrics_header(blocks: int) -> List[str]:
    return (['epoch'] + [f'loss_block{i}' for i in range(blocks)] + [f'acc_block{i}' for i in range(blocks)]
            + ['ensemble_accuracy', 'seconds'] + [f'spike_rate_layer{i}' for i in range(blocks)])


def _metrics_row(record: EpochRecord) -> List[Any]:
    return ([record.epoch] + [_fmt(v) for v in record.block_losses] + [_fmt(v) for v in record.block_accuracies]
            + [_fmt(record.accuracy), _fmt(record.seconds)] + [_fmt(v) for v in record.spike_rates])


def _checkpoint_metadata(config: ExperimentConfig, data: PreparedData, report: SimilarityReport) -> Dict[str, Any]:
    return {
        'config': config.dumps(),
        'input_shape': list(data.train.sample_shape),
        'stats_mean': [float(v) for v in data.stats.mean],
        'stats_std': [float(v) for v in data.stats.std],
        'complexity': [float(v) for v in report.complexity],
    }


def _measured_rates(net: Network, data: PreparedData, config: ExperimentConfig) -> List[float]:
    trace = network_forward(data.train.images[:config.batch_size], net, False, config.block_options())
    return trace.spike_rates


@dataclass
class TrainResult:
    history: List[EpochRecord]
    network: Network
    checkpoint: Path


def cmd_train(config: ExperimentConfig, paths: DataPaths, out_dir: Path) -> TrainResult:
    """
    Train a network and write ``metrics.csv``, ``spike_rates.csv``, ``config.txt`` and ``checkpoint.ffga``
    """
    pipeline = Pipeline()

    @pipeline.register
    def data():
        return prepare_data(config, paths)

    @pipeline.register
    def report(data):
        return _complexity(data, config)

    @pipeline.register
    def network(data, report):
        return build_network(config, data.c_in, report.complexity)

    @pipeline.register
    def history(data, network):
        return fit(data.train, network, config)

    @pipeline.register
    def written(data, report, network, history):
        out_dir.mkdir(parents=True, exist_ok=True)
        blocks = len(network.blocks)
        atomic_write(out_dir / 'metrics.csv', _csv([metrics_header(blocks)] + [_metrics_row(r) for r in history]))
        rates = history[-1].spike_rates if history else _measured_rates(network, data, config)
        atomic_write(out_dir / 'spike_rates.csv', write_spike_rates(rates))
        atomic_write(out_dir / 'config.txt', config.dumps())
        path = out_dir / 'checkpoint.ffga'
        save_checkpoint(path, Checkpoint(network, _checkpoint_metadata(config, data, report)))
        logger.info('wrote metrics and checkpoint to %s', out_dir)
        if data.test is not None:
            accuracy = float(np.mean(predict(data.test.images, network, config.block_options(),
                                             config.eval_batch_size) == data.test.labels))
            logger.info('test accuracy %.4f', accuracy)
        return path

    results = _run(pipeline)
    return TrainResult(results['history'], results['network'], results['written'])


@dataclass
class EvalResult:
    accuracy: float
    confusion: np.ndarray


def cmd_eval(checkpoint_path: Path, paths: DataPaths, out_dir: Optional[Path] = None, split: str = 'test',
             overrides: Optional[Dict[str, str]] = None) -> EvalResult:
    """
    Evaluate a checkpoint, writing ``confusion.csv`` (rows: true class, columns: predicted class) if out_dir is given
    """
    pipeline = Pipeline()

    @pipeline.register
    def checkpoint():
        return load_checkpoint(checkpoint_path)

    @pipeline.register
    def config(checkpoint):
        try:
            ret = ExperimentConfig.loads(checkpoint.metadata['config'])
        except KeyError:
            raise ConfigError(f'{checkpoint_path} does not record its configuration') from None
        return ret.with_overrides(overrides or {})

    @pipeline.register
    def data(checkpoint, config):
        meta = checkpoint.metadata
        stats = ChannelStats(np.asarray(meta['stats_mean']), np.asarray(meta['stats_std']))
        return prepare_split(config, paths, split, stats)

    @pipeline.register
    def confusion(checkpoint, config, data):
        predicted = predict(data.images, checkpoint.network, config.block_options(), config.eval_batch_size)
        k = checkpoint.network.classes
        ret = np.zeros((k, k), dtype=np.int64)
        np.add.at(ret, (data.labels, predicted), 1)
        return ret

    results = _run(pipeline)
    matrix = results['confusion']
    accuracy = float(np.trace(matrix) / matrix.sum())
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        k = len(matrix)
        atomic_write(out_dir / 'confusion.csv',
                     _csv([['true', *range(k)]] + [[c, *row] for c, row in enumerate(matrix)]))
    logger.info('accuracy %.4f on %d samples', accuracy, matrix.sum())
    return EvalResult(accuracy, matrix)


ABLATION_HEADER = ['strategy', 'epoch', 'train_accuracy', 'test_accuracy']


def cmd_ablate(config: ExperimentConfig, paths: DataPaths, out_dir: Optional[Path] = None) -> List[List[str]]:
    """
    Train three networks that differ only in their allocation strategy, from the same seed.
    :return: the rows of ``ablation.csv``, one per strategy and epoch
    """
    pipeline = Pipeline()

    @pipeline.register
    def data():
        return prepare_data(config, paths)

    @pipeline.register
    def report(data):
        return _complexity(data, config)

    def strategy_stage(strategy: AllocationStrategy):
        def run(data, report):
            net = build_network(config, data.c_in, report.complexity, strategy)
            rows = []

            def on_epoch(record: EpochRecord):
                test = ''
                if data.test is not None:
                    predicted = predict(data.test.images, net, config.block_options(), config.eval_batch_size)
                    test = _fmt(np.mean(predicted == data.test.labels))
                rows.append([strategy.name, str(record.epoch), _fmt(record.accuracy), test])

            fit(data.train, net, config, on_epoch)
            return rows

        run.__name__ = strategy.name
        return run

    for strategy in AllocationStrategy:
        pipeline.register(strategy_stage(strategy))

    results = _run(pipeline)
    rows = [row for strategy in AllocationStrategy for row in results[strategy.name]]
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        atomic_write(out_dir / 'ablation.csv', _csv([ABLATION_HEADER] + rows))
    return rows


def cmd_energy(descriptor: ArchDescriptor, input_shape: Tuple[int, int, int], spike_rates: Optional[List[float]],
               constants: EnergyConstants = EnergyConstants(),
               out_dir: Optional[Path] = None) -> List[Tuple[str, EnergyReport]]:
    """
    Cost the architecture as a spiking network (with the given spike rates) and as a dense network
    """
    if spike_rates is None:
        logger.warning('no spike rates given, hidden blocks are costed as silent')
        spike_rates = [0.0] * len(descriptor.arch)
    reports = [
        ('snn', estimate_energy(count_ops(descriptor, input_shape, spike_rates), constants)),
        ('dense', estimate_energy(count_dense_ops(descriptor, input_shape), constants)),
    ]
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        atomic_write(out_dir / 'energy.csv', report_csv(reports))
    return reports


def _int_tuple(text: str) -> Tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.replace('x', ',').split(',') if v)
    except ValueError:
        raise argparse.ArgumentTypeError(f'expected comma separated integers, got {text!r}') from None


def _key_value(text: str) -> Tuple[str, str]:
    key, sep, value = text.partition('=')
    if not sep:
        raise argparse.ArgumentTypeError(f'expected KEY=VALUE, got {text!r}')
    return key.strip(), value.strip()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='ffgaf-snn', description=__doc__.strip().splitlines()[0])
    parser.add_argument('--version', action='version', version=__version__)
    parser.add_argument('--log-level', default='INFO', choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'])

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', type=Path, help='a key = value configuration file')
    common.add_argument('--set', dest='overrides', type=_key_value, action='append', default=[],
                        metavar='KEY=VALUE', help='override a configuration value')
    common.add_argument('--dataset', choices=[d.name for d in DatasetName])
    common.add_argument('--epochs', type=int)
    common.add_argument('--seed', type=int)
    common.add_argument('--strategy', choices=[s.name for s in AllocationStrategy])
    common.add_argument('--feature-source', choices=[f.name for f in FeatureSource])
    common.add_argument('--quant-in-loss', action='store_true', default=None,
                        help='use the quantized activation inside the block loss')
    common.add_argument('--eq5-literal', action='store_true', default=None,
                        help='sum goodness over time steps instead of averaging')

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument('--train-images', type=Path)
    data.add_argument('--train-labels', type=Path)
    data.add_argument('--test-images', type=Path)
    data.add_argument('--test-labels', type=Path)
    data.add_argument('--cifar-train', type=Path, nargs='+', default=[])
    data.add_argument('--cifar-test', type=Path, nargs='+', default=[])

    out = argparse.ArgumentParser(add_help=False)
    out.add_argument('--out-dir', type=Path, default=Path('.'))

    sub = parser.add_subparsers(dest='command', required=True)
    sub.add_parser('analyze', parents=[common, data, out], help='class similarity and channel allocation')
    sub.add_parser('train', parents=[common, data, out], help='train a network')
    ev = sub.add_parser('eval', parents=[data, out], help='evaluate a checkpoint')
    ev.add_argument('checkpoint', type=Path)
    ev.add_argument('--split', choices=['train', 'test'], default='test')
    ev.add_argument('--set', dest='overrides', type=_key_value, action='append', default=[], metavar='KEY=VALUE')
    sub.add_parser('ablate', parents=[common, data, out], help='compare allocation strategies')

    en = sub.add_parser('energy', parents=[out], help='parameter and energy accounting')
    en.add_argument('--checkpoint', type=Path)
    en.add_argument('--arch', type=_int_tuple, help='channels per block, e.g. 40,120,120,240')
    en.add_argument('--strides', type=_int_tuple)
    en.add_argument('--c-in', type=int, default=3)
    en.add_argument('--kernel', type=int, default=3)
    en.add_argument('--horizon', type=int, default=10)
    en.add_argument('--input-shape', type=_int_tuple, help='C,H,W of one input, e.g. 3,32,32')
    en.add_argument('--spike-csv', type=Path, help='a layer,spike_rate CSV file')
    en.add_argument('--e-mac', type=float, default=4.6, help='pJ per MAC')
    en.add_argument('--e-ac', type=float, default=0.9, help='pJ per AC')
    en.add_argument('--e-mem-read', type=float, default=10.0, help='pJ per memory read')
    en.add_argument('--e-mem-write', type=float, default=10.0, help='pJ per memory write')
    en.add_argument('--label', default='45nm')
    return parser


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    config = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    config = config.with_overrides(dict(args.overrides))
    changes: Dict[str, Any] = {}
    if args.dataset:
        changes['dataset'] = DatasetName[args.dataset]
    if args.epochs is not None:
        changes['epochs'] = args.epochs
    if args.seed is not None:
        changes['seed'] = args.seed
    if args.strategy:
        changes['alloc_strategy'] = AllocationStrategy[args.strategy]
    if args.feature_source:
        changes['feature_source'] = FeatureSource[args.feature_source]
    if args.quant_in_loss:
        changes['quant_in_loss'] = True
    if args.eq5_literal:
        changes['eq5_divisor'] = GoodnessDivisor.literal
    return config.replace(**changes)


def _paths(args: argparse.Namespace) -> DataPaths:
    return DataPaths(args.train_images, args.train_labels, args.test_images, args.test_labels,
                     tuple(args.cifar_train), tuple(args.cifar_test))


def _energy_inputs(args: argparse.Namespace) -> Tuple[ArchDescriptor, Tuple[int, int, int]]:
    if args.checkpoint:
        checkpoint = load_checkpoint(args.checkpoint)
        descriptor = checkpoint.network.descriptor
        if descriptor is None or 'input_shape' not in checkpoint.metadata:
            raise ConfigError(f'{args.checkpoint} does not record its architecture')
        return descriptor, tuple(checkpoint.metadata['input_shape'])
    if not args.arch or not args.input_shape:
        raise ConfigError('energy needs either --checkpoint or both --arch and --input-shape')
    if len(args.input_shape) != 3:
        raise ConfigError('--input-shape must be C,H,W')
    strides = args.strides or (1,) * len(args.arch)
    if len(strides) == len(args.arch) + 1:
        if strides[-1] != 1:
            raise ConfigError(f'the trailing head stride must be 1, got {strides[-1]}')
        strides = strides[:-1]
    descriptor = ArchDescriptor(args.c_in, args.arch, strides, args.kernel, horizon=args.horizon)
    return descriptor, args.input_shape


def _dispatch(args: argparse.Namespace):
    if args.command == 'analyze':
        result = cmd_analyze(config_from_args(args), _paths(args), args.out_dir)
        for i, allocation in enumerate(result.allocations):
            print(f'block {i}: {allocation.channels_per_class}')
    elif args.command == 'train':
        result = cmd_train(config_from_args(args), _paths(args), args.out_dir)
        if result.history:
            print(f'final train accuracy: {result.history[-1].accuracy:.4f}')
    elif args.command == 'eval':
        result = cmd_eval(args.checkpoint, _paths(args), args.out_dir, args.split, dict(args.overrides))
        print(f'accuracy: {result.accuracy:.4f}')
    elif args.command == 'ablate':
        for row in cmd_ablate(config_from_args(args), _paths(args), args.out_dir):
            print(','.join(row))
    elif args.command == 'energy':
        descriptor, input_shape = _energy_inputs(args)
        rates = read_spike_rates(args.spike_csv) if args.spike_csv else None
        constants = EnergyConstants(args.e_mac * 1e-12, args.e_ac * 1e-12, args.e_mem_read * 1e-12,
                                    args.e_mem_write * 1e-12, args.label)
        print(format_table(cmd_energy(descriptor, input_shape, rates, constants, args.out_dir)))


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format=LOG_FORMAT)
    try:
        _dispatch(args)
    except ConfigError as e:
        logger.error('configuration error: %s', e)
        return EXIT_CONFIG
    except DataError as e:
        logger.error('data error: %s', e)
        return EXIT_DATA
    except NumericError as e:
        logger.error('numeric failure: %s', e)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == '__main__':
    sys.exit(main())
