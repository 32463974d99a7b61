"""
Experiment configuration.

Configuration files are flat ``key = value`` text, one setting per line, ``#`` starts a comment. Keys are the field
names of :class:`ExperimentConfig`, values are parsed according to the field's type.
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from enum import Enum, auto
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Union, get_type_hints

from ffgaf_snn.allocation import AllocationStrategy
from ffgaf_snn.architecture import ArchDescriptor
from ffgaf_snn.blocks import BlockOptions, GoodnessDivisor, LossMode
from ffgaf_snn.data import SyntheticPreset
from ffgaf_snn.exceptions import ConfigError
from ffgaf_snn.spiking import QuantActParams, SpikingLayer

__all__ = ['DatasetName', 'FeatureSource', 'ExperimentConfig', 'worker_count']

THREADS_ENV = 'FFGAF_THREADS'


class DatasetName(Enum):
    mnist = auto()
    fashion_mnist = auto()
    cifar10 = auto()
    synthetic = auto()


class FeatureSource(Enum):
    raw_pixels = auto()
    """
    Class similarity is measured on flattened images
    """
    encoder = auto()
    """
    Class similarity is measured on the pooled outputs of a trained encoding block
    """


_TRUE = frozenset(('1', 'true', 'yes', 'on'))
_FALSE = frozenset(('0', 'false', 'no', 'off'))


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetName = DatasetName.synthetic
    arch: Tuple[int, ...] = (16, 32)
    strides: Tuple[int, ...] = (1, 2)
    kernel: int = 3
    padding: int = 1
    horizon: int = 10
    thresh: float = 1.0
    levels: int = 0
    """
    quantization levels of the spiking drive, 0 uses the horizon
    """
    shift_phi: float = 0.5
    initial_charge_frac: float = 0.5
    alloc_phi: float = 2.0
    alloc_strategy: AllocationStrategy = AllocationStrategy.complexity_aware
    lr: float = 0.01
    batch_size: int = 128
    epochs: int = 3
    seed: int = 0
    loss_mode: LossMode = LossMode.softmax
    eq5_divisor: GoodnessDivisor = GoodnessDivisor.mean_with_T
    feature_source: FeatureSource = FeatureSource.raw_pixels
    quant_in_loss: bool = False
    channel_weighting: bool = True
    batch_sum_update: bool = True
    """
    step along the gradient of the batch-summed loss rather than the batch mean
    """
    norm_momentum: float = 0.1
    norm_eps: float = 1e-5
    temporal_gamma0: Optional[float] = None
    """
    initial gamma of temporal normalization, none uses thresh
    """
    exclude_encoding_from_vote: bool = False
    dtype: str = 'float32'
    record_time: bool = True
    train_limit: int = 0
    test_limit: int = 0
    eval_batch_size: int = 512
    synthetic_classes: int = 4
    synthetic_per_class: int = 500
    synthetic_shape: Tuple[int, ...] = (1, 8, 8)
    synthetic_separation: float = 8.0
    synthetic_preset: SyntheticPreset = SyntheticPreset.skewed

    def __post_init__(self):
        if len(self.strides) == len(self.arch) + 1:
            # the trailing stride belongs to the goodness head, which is an identity
            if self.strides[-1] != 1:
                raise ConfigError(f'the trailing goodness-head stride must be 1, got {self.strides[-1]}')
            object.__setattr__(self, 'strides', self.strides[:-1])
        elif len(self.strides) != len(self.arch):
            raise ConfigError(f'{len(self.arch)} blocks need {len(self.arch)} strides, got {len(self.strides)}')
        for name in ('kernel', 'horizon', 'batch_size', 'eval_batch_size', 'synthetic_classes',
                     'synthetic_per_class'):
            if getattr(self, name) < 1:
                raise ConfigError(f'{name} must be positive, got {getattr(self, name)}')
        for name in ('thresh', 'alloc_phi', 'norm_eps'):
            if getattr(self, name) <= 0:
                raise ConfigError(f'{name} must be positive, got {getattr(self, name)}')
        for name in ('epochs', 'levels', 'train_limit', 'test_limit', 'padding', 'lr', 'temporal_gamma0'):
            if getattr(self, name) is not None and getattr(self, name) < 0:
                raise ConfigError(f'{name} must not be negative, got {getattr(self, name)}')
        if self.dtype not in ('float32', 'float64'):
            raise ConfigError(f'dtype must be float32 or float64, got {self.dtype}')
        if not self.arch or min(self.arch) < 1 or min(self.strides) < 1:
            raise ConfigError('arch and strides must hold positive integers')
        # construct once to validate
        self.spiking_layer()
        self.quant_params()

    def arch_descriptor(self, c_in: int) -> ArchDescriptor:
        return ArchDescriptor(c_in, self.arch, self.strides, self.kernel, self.padding, self.horizon)

    def spiking_layer(self) -> SpikingLayer:
        return SpikingLayer(self.thresh, self.horizon, self.initial_charge_frac)

    def quant_params(self) -> QuantActParams:
        return QuantActParams(self.thresh, self.levels or self.horizon, self.shift_phi)

    def block_options(self) -> BlockOptions:
        return BlockOptions(self.loss_mode, self.eq5_divisor, self.quant_in_loss, self.channel_weighting,
                            self.batch_sum_update)

    def replace(self, **changes) -> ExperimentConfig:
        return dataclasses.replace(self, **changes)

    def with_overrides(self, overrides: Mapping[str, str]) -> ExperimentConfig:
        """
        :param overrides: textual values by key, as they would appear in a config file
        """
        hints = _field_types()
        changes = {}
        for key, value in overrides.items():
            if key not in hints:
                raise ConfigError(f'unknown configuration key {key!r}')
            changes[key] = _parse_value(key, value, hints[key])
        return self.replace(**changes)

    def dumps(self) -> str:
        return ''.join(f'{f.name} = {_format_value(getattr(self, f.name))}\n' for f in fields(self))

    @classmethod
    def loads(cls, text: str) -> ExperimentConfig:
        """
        :raises ConfigError: on unknown keys, malformed lines or unparsable values
        """
        overrides: Dict[str, str] = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split('#', 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition('=')
            if not sep:
                raise ConfigError(f'line {lineno}: expected "key = value", got {line!r}')
            key = key.strip()
            if key in overrides:
                raise ConfigError(f'line {lineno}: duplicate key {key!r}')
            overrides[key] = value.strip()
        return cls().with_overrides(overrides)

    @classmethod
    def load(cls, path: Union[str, os.PathLike]) -> ExperimentConfig:
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigError(f'cannot read config file {path}: {e}') from e
        return cls.loads(text)


def _field_types() -> Dict[str, Any]:
    return get_type_hints(ExperimentConfig)


def _parse_value(key: str, value: str, tp: Any) -> Any:
    args = getattr(tp, '__args__', ())
    if getattr(tp, '__origin__', None) is Union and type(None) in args:
        if value.lower() in ('', 'none'):
            return None
        tp, = (a for a in args if a is not type(None))
    try:
        if tp is bool:
            lowered = value.lower()
            if lowered in _TRUE:
                return True
            if lowered in _FALSE:
                return False
            raise ValueError(value)
        if isinstance(tp, type) and issubclass(tp, Enum):
            return tp[value]
        if getattr(tp, '__origin__', None) is tuple:
            return tuple(int(v) for v in value.replace(' ', '').strip('[]()').split(',') if v)
        return tp(value)
    except (KeyError, ValueError) as e:
        raise ConfigError(f'invalid value {value!r} for {key}') from e


def _format_value(value: Any) -> str:
    if value is None:
        return 'none'
    if isinstance(value, Enum):
        return value.name
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, tuple):
        return ','.join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def worker_count() -> int:
    """
    :return: the size of the worker pool, capped by the FFGAF_THREADS environment variable
    """
    default = os.cpu_count() or 1
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return default
    try:
        threads = int(raw)
    except ValueError:
        raise ConfigError(f'{THREADS_ENV} must be an integer, got {raw!r}') from None
    if threads < 1:
        raise ConfigError(f'{THREADS_ENV} must be positive, got {threads}')
    return threads
