"""
Dataset loaders (IDX for MNIST and Fashion-MNIST, the CIFAR-10 binary batches), preprocessing, batching and synthetic
datasets.
"""
from __future__ import annotations

import gzip
import itertools
import logging
import struct
from dataclasses import dataclass, replace
from enum import Enum, auto
from os import PathLike
from pathlib import Path
from typing import Iterator, Optional, Sequence, Tuple, Union

import numpy as np

from ffgaf_snn.exceptions import (BadMagicError, ConfigError, CountMismatchError, DataError, TruncatedFileError)
from ffgaf_snn.numerics import DEFAULT_DTYPE

__all__ = ['Dataset', 'ChannelStats', 'SyntheticPreset', 'load_idx', 'load_cifar10', 'save_idx', 'save_cifar10',
           'standardize', 'synthetic_classes', 'batches', 'subset']

logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_SIDE = 32
CIFAR_RECORD = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE

PathType = Union[str, PathLike]


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    name: str
    classes: int
    split: str = 'train'

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DataError(f'images must be N×C×H×W, got shape {self.images.shape}')
        if len(self.images) < 1:
            raise DataError(f'dataset {self.name} ({self.split}) is empty')
        if len(self.labels) != len(self.images):
            raise CountMismatchError(f'{len(self.images)} images but {len(self.labels)} labels')
        if self.labels.min() < 0 or self.labels.max() >= self.classes:
            raise DataError(f'labels of {self.name} must lie in [0, {self.classes})')
        if not np.all(np.isfinite(self.images)):
            raise DataError(f'dataset {self.name} holds non-finite pixels')

    def __len__(self):
        return len(self.labels)

    @property
    def sample_shape(self) -> Tuple[int, int, int]:
        return self.images.shape[1:]


@dataclass(frozen=True)
class ChannelStats:
    mean: np.ndarray
    std: np.ndarray


def _read_bytes(path: PathType) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == '.gz' else open
    try:
        with opener(path, 'rb') as f:
            return f.read()
    except OSError as e:
        raise DataError(f'cannot read {path}: {e}') from e


def _write_bytes(path: PathType, data: bytes):
    path = Path(path)
    opener = gzip.open if path.suffix == '.gz' else open
    with opener(path, 'wb') as f:
        f.write(data)


def _idx_header(buf: bytes, magic: int, dims: int, path: PathType) -> Tuple[int, ...]:
    size = 4 * (1 + dims)
    if len(buf) < size:
        raise TruncatedFileError(f'{path}: truncated IDX header')
    found, *shape = struct.unpack(f'>{1 + dims}I', buf[:size])
    if found != magic:
        raise BadMagicError(f'{path}: bad magic {found:#010x}, expected {magic:#010x}')
    expected = size + int(np.prod(shape))
    if len(buf) < expected:
        raise TruncatedFileError(f'{path}: truncated IDX body, expected {expected} bytes, got {len(buf)}')
    return tuple(shape)


def load_idx(images_path: PathType, labels_path: PathType, name: str = 'mnist', split: str = 'train',
             classes: int = 10, dtype=DEFAULT_DTYPE) -> Dataset:
    """
    Load an IDX image/label file pair, files ending with .gz are decompressed.
    :return: a dataset of 1×rows×cols images scaled to [0, 1]
    :raises BadMagicError: if either file has the wrong magic number
    :raises TruncatedFileError: if either file is shorter than its header claims
    :raises CountMismatchError: if the files disagree on the number of samples
    """
    image_buf = _read_bytes(images_path)
    label_buf = _read_bytes(labels_path)
    n, rows, cols = _idx_header(image_buf, IDX_IMAGES_MAGIC, 3, images_path)
    n_labels, = _idx_header(label_buf, IDX_LABELS_MAGIC, 1, labels_path)
    if n != n_labels:
        raise CountMismatchError(f'{images_path} holds {n} images but {labels_path} holds {n_labels} labels')
    pixels = np.frombuffer(image_buf, dtype=np.uint8, count=n * rows * cols, offset=16)
    labels = np.frombuffer(label_buf, dtype=np.uint8, count=n, offset=8).astype(np.int64)
    images = (pixels.reshape(n, 1, rows, cols) / 255.0).astype(dtype)
    logger.info('loaded %d %s images from %s', n, name, images_path)
    return Dataset(images, labels, name, classes, split)


def load_cifar10(batch_paths: Sequence[PathType], split: str = 'train', dtype=DEFAULT_DTYPE) -> Dataset:
    """
    Load CIFAR-10 binary batches: records of one label byte followed by 32×32 R, G and B planes.
    :raises DataError: if a file is empty or its length is not a whole number of records
    """
    images = []
    labels = []
    for path in batch_paths:
        buf = _read_bytes(path)
        if not buf or len(buf) % CIFAR_RECORD:
            raise DataError(f'{path}: length {len(buf)} is not a positive multiple of {CIFAR_RECORD}')
        records = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        labels.append(records[:, 0].astype(np.int64))
        images.append(records[:, 1:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE))
    if not images:
        raise DataError('no CIFAR-10 batch files given')
    pixels = np.concatenate(images)
    logger.info('loaded %d cifar10 images from %d files', len(pixels), len(images))
    return Dataset((pixels / 255.0).astype(dtype), np.concatenate(labels), 'cifar10', 10, split)


def _to_bytes(images: np.ndarray) -> np.ndarray:
    if images.min() < 0 or images.max() > 1:
        raise DataError('only images scaled to [0, 1] can be written')
    return np.rint(images * 255.0).astype(np.uint8)


def save_idx(d: Dataset, images_path: PathType, labels_path: PathType):
    """
    Write a single-channel dataset as an IDX file pair
    """
    n, c, rows, cols = d.images.shape
    if c != 1:
        raise DataError(f'IDX files hold single-channel images, got {c} channels')
    _write_bytes(images_path, struct.pack('>4I', IDX_IMAGES_MAGIC, n, rows, cols) + _to_bytes(d.images).tobytes())
    _write_bytes(labels_path, struct.pack('>2I', IDX_LABELS_MAGIC, n) + d.labels.astype(np.uint8).tobytes())


def save_cifar10(d: Dataset, path: PathType):
    """
    Write a dataset as a single CIFAR-10 binary batch
    """
    if d.sample_shape != (3, CIFAR_SIDE, CIFAR_SIDE):
        raise DataError(f'CIFAR-10 records hold 3×32×32 images, got {d.sample_shape}')
    records = np.concatenate([d.labels.astype(np.uint8)[:, None], _to_bytes(d.images).reshape(len(d), -1)], axis=1)
    _write_bytes(path, records.tobytes())


def standardize(d: Dataset, stats: Optional[ChannelStats] = None) -> Tuple[Dataset, ChannelStats]:
    """
    Per-channel standardization.
    :param stats: statistics to apply, computed from d if missing (pass the train split's to the test split)
    :return: the standardized dataset and the statistics used. Channels with no spread map to zeros.
    """
    if stats is None:
        mean = d.images.mean(axis=(0, 2, 3), dtype=np.float64)
        std = d.images.std(axis=(0, 2, 3), dtype=np.float64)
        stats = ChannelStats(mean, std)
    if len(stats.mean) != d.images.shape[1]:
        raise ConfigError(f'statistics for {len(stats.mean)} channels applied to {d.images.shape[1]} channels')
    safe_std = np.where(stats.std > 0, stats.std, 1.0)
    images = (d.images - stats.mean[None, :, None, None]) / safe_std[None, :, None, None]
    return replace(d, images=images.astype(d.images.dtype)), stats


class SyntheticPreset(Enum):
    isotropic = auto()
    """
    All class patterns mutually orthogonal
    """
    skewed = auto()
    """
    Classes 0 and 1 nearly parallel, the rest orthogonal
    """


SKEWED_COSINE = 0.9


def _cosine_basis(n: int, u: int) -> np.ndarray:
    ret = np.cos(np.pi * (2 * np.arange(n) + 1) * u / (2 * n))
    return ret / np.linalg.norm(ret)


def _texture_patterns(shape: Tuple[int, int, int], k: int, rng: np.random.Generator) -> np.ndarray:
    """
    k orthonormal cosine textures over C×H×W, one flattened pattern per row. Frequencies closest to half the grid's
    Nyquist come first, so the patterns vary within a 3×3 neighbourhood, constant patterns come last.
    """
    c, h, w = shape
    candidates = sorted(itertools.product(range(c), range(h), range(w)),
                        key=lambda cuv: (abs(2 * cuv[1] - h) + abs(2 * cuv[2] - w), cuv[1], cuv[2], cuv[0]))
    signs = rng.choice((-1.0, 1.0), size=k)
    ret = np.zeros((k,) + tuple(shape))
    for j, (channel, u, v) in zip(rng.permutation(k), candidates[:k]):
        ret[j, channel] = signs[j] * np.outer(_cosine_basis(h, u), _cosine_basis(w, v))
    return ret.reshape(k, -1)


def synthetic_classes(k: int, per_class: int, shape: Union[int, Tuple[int, ...]] = (1, 8, 8),
                      separation: float = 8.0, seed: int = 0,
                      preset: SyntheticPreset = SyntheticPreset.isotropic, dtype=DEFAULT_DTYPE,
                      split: str = 'train') -> Dataset:
    """
    Class patterns of norm `separation` under unit-variance pixel noise. The patterns are orthonormal cosine
    textures, so a small convolution scored by its spatial mean can tell them apart.
    Every split of the same seed shares the class patterns and draws its own noise.
    :param shape: the sample shape, either C×H×W or a flat dimension D (laid out as D×1×1)
    """
    if isinstance(shape, int):
        shape = (shape, 1, 1)
    if k < 1 or per_class < 1:
        raise ConfigError('synthetic datasets need at least one class and one sample per class')
    if len(shape) != 3:
        raise ConfigError(f'synthetic samples are C×H×W, got shape {shape}')
    dim = int(np.prod(shape))
    if dim < k:
        raise ConfigError(f'{k} orthogonal class patterns need at least {k} dimensions, got {dim}')
    directions = _texture_patterns(tuple(shape), k, np.random.default_rng(seed))
    if preset is SyntheticPreset.skewed and k >= 2:
        directions[1] = SKEWED_COSINE * directions[0] + np.sqrt(1 - SKEWED_COSINE ** 2) * directions[1]
    means = separation * directions
    labels = np.repeat(np.arange(k), per_class)
    rng = np.random.default_rng([seed, 0 if split == 'train' else 1])
    samples = means[labels] + rng.normal(size=(len(labels), dim))
    order = rng.permutation(len(labels))
    return Dataset(samples[order].reshape((len(labels),) + tuple(shape)).astype(dtype), labels[order],
                   f'synthetic-{preset.name}', k, split)


def subset(d: Dataset, limit: int) -> Dataset:
    """
    :return: the first `limit` samples of d, or d itself if limit is 0 or covers it
    """
    if limit <= 0 or limit >= len(d):
        return d
    return replace(d, images=d.images[:limit], labels=d.labels[:limit])


def batches(d: Dataset, batch_size: int, shuffle: bool = True, seed: int = 0,
            epoch: int = 0) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """
    Iterate over d in batches covering every sample once, the last batch may be smaller.
    The order is a deterministic function of (seed, epoch).
    """
    if batch_size < 1:
        raise ConfigError(f'batch size must be positive, got {batch_size}')
    if shuffle:
        order = np.random.default_rng([seed, epoch]).permutation(len(d))
    else:
        order = np.arange(len(d))
    for start in range(0, len(d), batch_size):
        idx = order[start:start + batch_size]
        yield d.images[idx], d.labels[idx]
