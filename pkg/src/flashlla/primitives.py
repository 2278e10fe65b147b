"""Kernel weights, relative matmul and streamed centered statistics.

Nothing here materializes the pairwise differences ``k_j - q_i``; every
routine works from ``Q`` and ``K`` directly with working memory linear in
the number of rows.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import as_matrix, as_vector, causal_mask

KERNELS = ("exp", "rbf")


def default_bandwidth(d: int) -> float:
    return 2.0 * np.sqrt(d)


def qk_normalize(X, scale: float = 1.0) -> np.ndarray:
    """Rescale each row to norm ``scale`` (QK normalization)."""
    X = as_matrix(X)
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    return scale * X / np.where(norms > 0, norms, 1.0)


def _check_kernel(h: float, kind: str) -> None:
    if not h > 0:
        raise ValueError(f"bandwidth h must be positive, got {h}")
    if kind not in KERNELS:
        raise ValueError(f"unknown kernel {kind!r}; expected one of {KERNELS}")


def kernel_logits(Q, K, h: float, *, kind: str = "exp", causal: bool = True,
                  row_offset: int = 0, col_offset: int = 0) -> np.ndarray:
    """Log kernel weights; masked (future) entries are ``-inf``.

    ``kind="exp"`` gives ``q.k / h``; ``kind="rbf"`` gives ``-|k - q|^2 / h``.
    """
    _check_kernel(h, kind)
    Q = as_matrix(Q, "Q")
    K = as_matrix(K, "K")
    if Q.shape[1] != K.shape[1]:
        raise ValueError(f"feature mismatch: Q has {Q.shape[1]} cols, K has {K.shape[1]}")
    return _logits(Q, K, h, kind, causal, row_offset, col_offset)


def _logits(Q, K, h, kind, causal, row_offset, col_offset):
    # unchecked core shared by the tile loops
    if kind == "exp":
        L = (Q @ K.T) / h
    else:
        qq = np.einsum("ij,ij->i", Q, Q)
        kk = np.einsum("ij,ij->i", K, K)
        L = (2.0 * (Q @ K.T) - kk[None, :] - qq[:, None]) / h
    if causal and col_offset + K.shape[0] - 1 > row_offset:
        L[~causal_mask(Q.shape[0], K.shape[0], row_offset, col_offset)] = -np.inf
    return L


def kernel_weights(Q, K, h: float, causal: bool = True, shift=None, *, kind: str = "exp",
                   row_offset: int = 0, col_offset: int = 0) -> np.ndarray:
    """``W[i, j] = exp(logit_ij - shift[i])``, zero above the diagonal when causal."""
    L = kernel_logits(Q, K, h, kind=kind, causal=causal,
                      row_offset=row_offset, col_offset=col_offset)
    if shift is not None:
        shift = as_vector(shift, "shift")
        if shift.shape[0] != L.shape[0]:
            raise ValueError("shift must have one entry per query row")
        L -= shift[:, None]
    return np.exp(L)


def relmm(X, Q, K) -> np.ndarray:
    """``out[i, j] = x_i . (k_j - q_i)`` computed as ``X K^T - rsum(X * Q)``."""
    X = as_matrix(X, "X")
    Q = as_matrix(Q, "Q")
    K = as_matrix(K, "K")
    if X.shape != Q.shape:
        raise ValueError(f"X {X.shape} and Q {Q.shape} must have the same shape")
    if X.shape[1] != K.shape[1]:
        raise ValueError(f"X has {X.shape[1]} cols, K has {K.shape[1]}")
    return X @ K.T - np.einsum("ij,ij->i", X, Q)[:, None]


@dataclass(frozen=True)
class CenteredStats:
    """Per-query zeroth/first moments of the max-shifted kernel weights.

    ``omega[i] = sum_j w~_ij``, ``mu_tilde[i] = sum_j w~_ij k_j`` and
    ``mu[i] = mu_tilde[i] - omega[i] q_i`` where ``w~_ij = exp(logit_ij - run_max[i])``.
    The second moment is never stored; :func:`flashlla.cg.sigma_matvec`
    applies it implicitly.
    """

    omega: np.ndarray
    mu_tilde: np.ndarray
    mu: np.ndarray
    run_max: np.ndarray
    arg_max: np.ndarray
    degenerate: np.ndarray
    h: float
    kind: str
    causal: bool
    row_offset: int
    n_keys: int

    @property
    def n_rows(self) -> int:
        return self.omega.shape[0]


def split_blocks(K, block: int) -> list[np.ndarray]:
    """Row-slice views of ``K`` of at most ``block`` rows each."""
    if block < 1:
        raise ValueError("block size must be >= 1")
    K = as_matrix(K, "K")
    return [K[s:s + block] for s in range(0, K.shape[0], block)]


def block_logits(Q, K_blocks: Sequence[np.ndarray], h: float, *, kind: str, causal: bool,
                 row_offset: int):
    """Yield ``(col_offset, K_c, logits)`` per key block, skipping fully masked blocks."""
    _check_kernel(h, kind)
    last_row = row_offset + Q.shape[0] - 1
    col = 0
    for Kc in K_blocks:
        if causal and col > last_row:
            break
        yield col, Kc, _logits(Q, Kc, h, kind, causal, row_offset, col)
        col += Kc.shape[0]


def accumulate_stats(Q, K_blocks: Sequence[np.ndarray], h: float, *, causal: bool = True,
                     kind: str = "exp", row_offset: int = 0) -> CenteredStats:
    """Stream key blocks once, keeping a running row maximum of the logits.

    When a block raises the maximum from ``m_old`` to ``m`` the accumulated
    sums are rescaled by ``exp(m_old - m)``, as in online softmax.
    """
    _check_kernel(h, kind)
    Q = as_matrix(Q, "Q")
    n, d = Q.shape
    blocks = [as_matrix(Kc, "K block") for Kc in K_blocks]
    for Kc in blocks:
        if Kc.shape[1] != d:
            raise ValueError("all key blocks must share Q's feature dimension")
    omega = np.zeros(n)
    mu_tilde = np.zeros((n, d))
    run_max = np.full(n, -np.inf)
    arg_max = np.full(n, -1, dtype=np.int64)
    for col, Kc, L in block_logits(Q, blocks, h, kind=kind, causal=causal, row_offset=row_offset):
        blk_arg = np.argmax(L, axis=1)
        blk_max = L[np.arange(n), blk_arg]
        raise_max = blk_max > run_max
        m = np.where(raise_max, blk_max, run_max)
        live = np.isfinite(m)
        safe_m = np.where(live, m, 0.0)
        alpha = np.exp(run_max - safe_m)
        W = np.exp(L - safe_m[:, None])
        omega = alpha * omega + W.sum(axis=1)
        mu_tilde = alpha[:, None] * mu_tilde + W @ Kc
        arg_max = np.where(raise_max, col + blk_arg, arg_max)
        run_max = m
    degenerate = ~np.isfinite(run_max)
    run_max = np.where(degenerate, 0.0, run_max)
    n_keys = sum(Kc.shape[0] for Kc in blocks)
    return CenteredStats(
        omega=omega,
        mu_tilde=mu_tilde,
        mu=mu_tilde - omega[:, None] * Q,
        run_max=run_max,
        arg_max=arg_max,
        degenerate=degenerate,
        h=float(h),
        kind=kind,
        causal=causal,
        row_offset=row_offset,
        n_keys=n_keys,
    )
