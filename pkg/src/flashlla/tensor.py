"""Dense structural operators shared by every kernel.

Matrices and vectors are plain float64 numpy arrays in C order.
"""
from __future__ import annotations

import numpy as np


def as_matrix(X, name: str = "X") -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {X.shape}")
    return X


def as_vector(x, name: str = "x") -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {x.shape}")
    return x


def rsum(X) -> np.ndarray:
    """Row sums, ``X @ 1``."""
    return as_matrix(X).sum(axis=1)


def bcast(x, cols: int) -> np.ndarray:
    """Repeat a column vector ``cols`` times, ``x @ 1.T``."""
    x = as_vector(x)
    return np.repeat(x[:, None], cols, axis=1)


def brsum(X) -> np.ndarray:
    X = as_matrix(X)
    return bcast(rsum(X), X.shape[1])


def tril(X, fill: float = 0.0) -> np.ndarray:
    """Keep the lower triangle (diagonal included) of a square matrix.

    Entries above the diagonal are replaced by ``fill``; pass ``-np.inf`` when
    masking logits before exponentiation.
    """
    X = as_matrix(X)
    if X.shape[0] != X.shape[1]:
        raise ValueError(f"tril expects a square matrix, got shape {X.shape}")
    out = X.copy()
    out[np.triu_indices(X.shape[0], k=1)] = fill
    return out


def causal_mask(n_rows: int, n_cols: int, row_offset: int = 0, col_offset: int = 0) -> np.ndarray:
    """Boolean mask ``True`` where key position <= query position.

    Offsets give the global positions of the first row and column so that a
    tile cut from a larger sequence is masked consistently.
    """
    rows = np.arange(row_offset, row_offset + n_rows)[:, None]
    cols = np.arange(col_offset, col_offset + n_cols)[None, :]
    return cols <= rows
