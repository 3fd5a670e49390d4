# polarseg/utils/resample.py
import math
from typing import Tuple

import numpy as np


def bilinear_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """
    Row-stochastic (n_out x n_in) matrix of half-pixel bilinear interpolation weights.
    Equal sizes give the identity exactly.
    """
    matrix = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for i in range(n_out):
        src = min(max((i + 0.5) * scale - 0.5, 0.0), n_in - 1.0)
        lo = int(math.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        matrix[i, lo] += 1.0 - frac
        matrix[i, hi] += frac
    return matrix.astype(dtype)


def adaptive_pool_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Averaging matrix with bins [floor(i*n/g), ceil((i+1)*n/g)); bins may overlap when n_out > n_in."""
    matrix = np.zeros((n_out, n_in), dtype=np.float64)
    for i in range(n_out):
        start = (i * n_in) // n_out
        end = -((-(i + 1) * n_in) // n_out)
        matrix[i, start:end] = 1.0 / (end - start)
    return matrix.astype(dtype)


def nearest_indices(n_in: int, n_out: int) -> np.ndarray:
    src = np.floor((np.arange(n_out) + 0.5) * (n_in / n_out)).astype(np.int64)
    return np.clip(src, 0, n_in - 1)


def resize_bilinear_hw(plane: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    """Bilinear resize of an array whose first two axes are H and W."""
    height, width = plane.shape[:2]
    if (height, width) == tuple(size):
        return plane.copy()
    rows = bilinear_matrix(height, size[0])
    cols = bilinear_matrix(width, size[1])
    out = np.tensordot(rows, plane.astype(np.float64), axes=(1, 0))
    out = np.moveaxis(np.tensordot(cols, out, axes=(1, 1)), 0, 1)
    return out.astype(plane.dtype, copy=False)


def resize_nearest_hw(plane: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    height, width = plane.shape[:2]
    if (height, width) == tuple(size):
        return plane.copy()
    return plane[nearest_indices(height, size[0])][:, nearest_indices(width, size[1])]
