import os
from pathlib import Path
from typing import Callable

import numpy as np
from pytest import mark, skip

FD_STEP = 1e-5

slow = mark.skipif(os.environ.get('FFGAF_SLOW') != '1', reason='set FFGAF_SLOW=1 to run desk-scale runs')


def data_dir(name: str) -> Path:
    """
    :return: the directory of a real dataset under FFGAF_DATA, skipping the test if it is missing
    """
    root = os.environ.get('FFGAF_DATA')
    if not root or not os.path.isdir(os.path.join(root, name)):
        skip(f'dataset {name} not found under FFGAF_DATA')
    return Path(root, name)


def numeric_grad(f: Callable[[], float], x: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """
    Central finite differences of a scalar function with respect to x, x is perturbed in place and restored
    """
    grad = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=['multi_index'])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + step
        plus = f()
        x[idx] = orig - step
        minus = f()
        x[idx] = orig
        grad[idx] = (plus - minus) / (2 * step)
    return grad


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-8)
    return float(np.abs(analytic - numeric).max() / scale)
