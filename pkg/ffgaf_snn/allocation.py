"""
Class-complexity analysis and per-class channel budgets.

Classes whose mean features resemble many other classes are harder to tell apart, so they receive a larger share of
each block's output channels.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum, auto
from typing import List, Tuple

import numpy as np

from ffgaf_snn.exceptions import ConfigError, DataError, EmptyClassError, ShapeError

__all__ = ['AllocationStrategy', 'Allocation', 'SimilarityReport', 'class_means', 'similarity_matrix',
           'normalized_complexity', 'allocate', 'analyze_similarity']

logger = logging.getLogger(__name__)


class AllocationStrategy(Enum):
    complexity_aware = auto()
    """
    More channels to classes with a higher discrimination complexity
    """
    uniform = auto()
    """
    Equal shares regardless of complexity
    """
    worst_case = auto()
    """
    More channels to the classes that are easiest to discriminate
    """


@dataclass(frozen=True)
class Allocation:
    channels_per_class: Tuple[int, ...]
    total: int
    strategy: AllocationStrategy = AllocationStrategy.complexity_aware
    phi: float = 2.0

    def __post_init__(self):
        if sum(self.channels_per_class) != self.total:
            raise ConfigError(f'allocation {self.channels_per_class} does not sum to {self.total}')
        if any(c < 1 for c in self.channels_per_class):
            raise ConfigError(f'every class needs at least one channel, got {self.channels_per_class}')

    @property
    def classes(self) -> int:
        return len(self.channels_per_class)

    def bounds(self) -> List[Tuple[int, int]]:
        """
        :return: the [start, stop) channel range owned by each class, classes own contiguous ranges in class order
        """
        stops = np.cumsum(self.channels_per_class)
        return [(int(stop - count), int(stop)) for stop, count in zip(stops, self.channels_per_class)]

    def owner(self) -> np.ndarray:
        """
        :return: for every channel, the class that owns it
        """
        return np.repeat(np.arange(self.classes), self.channels_per_class)


@dataclass(frozen=True)
class SimilarityReport:
    class_means: np.ndarray
    matrix: np.ndarray
    complexity: np.ndarray
    sample_counts: np.ndarray


def class_means(features: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    """
    :param features: N×D feature matrix
    :param labels: N class ids in [0, k)
    :param k: number of classes
    :return: K×D matrix whose row c is the mean of the features labeled c
    :raises EmptyClassError: if a class has no samples
    """
    features = features.reshape(len(features), -1)
    labels = np.asarray(labels)
    if len(labels) != len(features):
        raise ShapeError(f'got {len(features)} feature rows but {len(labels)} labels')
    if len(labels) and (labels.min() < 0 or labels.max() >= k):
        raise DataError(f'labels must lie in [0, {k})')
    counts = np.bincount(labels, minlength=k)
    empty = np.flatnonzero(counts == 0)
    if len(empty):
        raise EmptyClassError(int(empty[0]))
    sums = np.zeros((k, features.shape[1]), dtype=np.float64)
    np.add.at(sums, labels, features)
    return sums / counts[:, None]


def similarity_matrix(means: np.ndarray) -> np.ndarray:
    """
    Pairwise cosine similarity between class means, rows with zero norm are similar to nothing (themselves included).
    """
    if means.ndim != 2 or len(means) < 2:
        raise ConfigError('similarity needs at least 2 classes')
    norms = np.linalg.norm(means, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    unit = means / safe[:, None]
    unit[norms == 0] = 0.0
    matrix = np.clip(unit @ unit.T, -1.0, 1.0)
    # the product is symmetric only up to rounding
    return (matrix + matrix.T) / 2


def normalized_complexity(s: np.ndarray) -> np.ndarray:
    """
    Row sums of the similarity matrix standardized to zero mean and unit population std.
    If all row sums are equal, all complexities are 0.
    """
    sums = s.sum(axis=1)
    mu = sums.mean()
    sigma = sums.std()
    if sigma <= 1e-12 * max(1.0, abs(mu)):
        return np.zeros_like(sums)
    return (sums - mu) / sigma


def _uniform(k: int, total: int) -> np.ndarray:
    channels = np.full(k, total // k, dtype=np.int64)
    channels[:total % k] += 1
    return channels


def _proportional(complexity: np.ndarray, total: int, phi: float) -> np.ndarray:
    weights = complexity - complexity.min() + phi
    shares = weights / weights.sum() * total
    channels = np.floor(shares).astype(np.int64)
    leftover = total - int(channels.sum())
    fractions = shares - channels
    # descending fraction, ties to the lower class index
    order = sorted(range(len(shares)), key=lambda c: (-fractions[c], c))
    for c in order[:leftover]:
        channels[c] += 1

    starved = [c for c in sorted(range(len(shares)), key=lambda c: (-shares[c], c)) if channels[c] == 0]
    if starved:
        logger.warning('classes %s received no channels, taking channels from the largest holders', starved)
    for c in starved:
        # among the largest holders, the one with the smallest share gives a channel up
        donor = min(range(len(shares)), key=lambda d: (-channels[d], shares[d], -d))
        channels[donor] -= 1
        channels[c] += 1
    return channels


def allocate(complexity: np.ndarray, total: int, phi: float = 2.0,
             strategy: AllocationStrategy = AllocationStrategy.complexity_aware) -> Allocation:
    """
    Split `total` channels between classes.
    :param complexity: the normalized complexity of every class
    :param total: the number of channels to split
    :param phi: the uniformity term, larger values pull the allocation towards equal shares
    :param strategy: the allocation strategy
    :raises ConfigError: if there are fewer channels than classes, or phi is not positive
    """
    complexity = np.asarray(complexity, dtype=np.float64)
    k = len(complexity)
    if k < 1:
        raise ConfigError('cannot allocate channels to zero classes')
    if total < k:
        raise ConfigError(f'cannot give each of {k} classes a channel out of {total}')
    if strategy is AllocationStrategy.uniform:
        channels = _uniform(k, total)
    else:
        if phi <= 0:
            raise ConfigError(f'phi must be positive, got {phi}')
        if strategy is AllocationStrategy.worst_case:
            complexity = -complexity
        channels = _proportional(complexity, total, phi)
    ret = Allocation(tuple(int(c) for c in channels), total, strategy, phi)
    logger.debug('%s allocation of %d channels: %s', strategy.name, total, ret.channels_per_class)
    return ret


def analyze_similarity(features: np.ndarray, labels: np.ndarray, k: int) -> SimilarityReport:
    """
    Run the whole analysis: class means, their similarity matrix and the normalized complexity of each class.
    """
    means = class_means(features, labels, k)
    matrix = similarity_matrix(means)
    return SimilarityReport(means, matrix, normalized_complexity(matrix),
                            np.bincount(np.asarray(labels), minlength=k))
