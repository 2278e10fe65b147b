"""Batched, matrix-free conjugate gradients for the per-query systems.

Row ``i`` of every matrix here is an independent ``d``-dimensional system
``Sigma_i x_i = y_i`` with

    Sigma_i = sum_j w~_ij (k_j - q_i)(k_j - q_i)^T + lam_i I

where ``w~`` are the max-shifted kernel weights recorded in a
:class:`~flashlla.primitives.CenteredStats`.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .primitives import CenteredStats, block_logits
from .tensor import as_matrix


class CGConvergenceWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class CGConfig:
    """``max_iters=None`` resolves to ``min(d, 32)`` at solve time."""

    max_iters: Optional[int] = None
    tol: float = 1e-6
    lam: object = 1.0

    def __post_init__(self):
        if self.max_iters is not None and self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.tol < 0:
            raise ValueError("tol must be >= 0")

    def iterations(self, d: int) -> int:
        return self.max_iters if self.max_iters is not None else min(d, 32)


@dataclass
class CGResult:
    X: np.ndarray
    converged: np.ndarray
    breakdown: np.ndarray
    iterations: np.ndarray
    residual_norm: np.ndarray
    history: Optional[np.ndarray] = None


def lambda_vector(lam, n: int) -> np.ndarray:
    lam = np.asarray(lam, dtype=np.float64)
    if lam.ndim == 0:
        lam = np.full(n, float(lam))
    if lam.shape != (n,):
        raise ValueError(f"lambda must be scalar or length {n}, got shape {lam.shape}")
    if np.any(lam < 0) or not np.all(np.isfinite(lam)):
        raise ValueError("lambda entries must be finite and >= 0")
    return lam


def _check_stats(Q, K_blocks, stats: CenteredStats, h: float) -> None:
    if stats.n_rows != Q.shape[0]:
        raise ValueError(f"stats cover {stats.n_rows} rows but Q has {Q.shape[0]}")
    if stats.h != float(h):
        raise ValueError(f"stats were accumulated with h={stats.h}, got h={h}")
    n_keys = sum(Kc.shape[0] for Kc in K_blocks)
    if stats.n_keys != n_keys:
        raise ValueError(f"stats were accumulated over {stats.n_keys} keys, got {n_keys}")


def sigma_matvec(P, Q, K_blocks: Sequence[np.ndarray], stats: CenteredStats, lam, h: float) -> np.ndarray:
    """Row ``i`` of the result is ``Sigma_i p_i``, one pass over the key blocks."""
    P = as_matrix(P, "P")
    Q = as_matrix(Q, "Q")
    if P.shape != Q.shape:
        raise ValueError(f"P {P.shape} and Q {Q.shape} must have the same shape")
    _check_stats(Q, K_blocks, stats, h)
    return _apply_sigma(P, Q, K_blocks, stats, lambda_vector(lam, Q.shape[0]), h)


def _apply_sigma(P, Q, K_blocks, stats, lam, h):
    out = np.zeros_like(P)
    for _, Kc, L in block_logits(Q, K_blocks, h, kind=stats.kind, causal=stats.causal,
                                 row_offset=stats.row_offset):
        W = np.exp(L - stats.run_max[:, None])
        out += (W * (P @ Kc.T)) @ Kc
    qp = np.einsum("ij,ij->i", Q, P)
    mp = np.einsum("ij,ij->i", stats.mu_tilde, P)
    out -= qp[:, None] * stats.mu_tilde
    out -= mp[:, None] * Q
    out += (stats.omega * qp)[:, None] * Q
    out += lam[:, None] * P
    return out


def cg_solve(Y, Q, K_blocks: Sequence[np.ndarray], stats: CenteredStats, cfg: CGConfig, h: float,
             *, record_history: bool = False, warn: bool = True) -> CGResult:
    """Solve every row system from ``X = 0`` with an active mask.

    A row leaves the active set once ``|r| <= tol * max(1, |y|)`` or when a
    non-positive curvature ``p^T Sigma p <= 0`` is met (flagged in
    ``breakdown``). Inactive rows are never touched again.
    """
    Y = as_matrix(Y, "Y")
    Q = as_matrix(Q, "Q")
    if not np.all(np.isfinite(Y)):
        raise ValueError("right-hand side must be finite")
    if Y.shape != Q.shape:
        raise ValueError(f"Y {Y.shape} and Q {Q.shape} must have the same shape")
    _check_stats(Q, K_blocks, stats, h)
    n, d = Y.shape
    lam = lambda_vector(cfg.lam, n)
    T = cfg.iterations(d)

    X = np.zeros_like(Y)
    R = Y.copy()
    P = Y.copy()
    rr = np.einsum("ij,ij->i", R, R)
    thresh = cfg.tol * np.maximum(1.0, np.sqrt(rr))
    active = np.sqrt(rr) > thresh
    converged = ~active
    breakdown = np.zeros(n, dtype=bool)
    iters = np.zeros(n, dtype=np.int64)
    history = None
    if record_history:
        history = np.full((T + 1, n), np.nan)
        history[0] = np.sqrt(rr)

    for t in range(1, T + 1):
        if not active.any():
            break
        SP = _apply_sigma(P, Q, K_blocks, stats, lam, h)
        pSp = np.einsum("ij,ij->i", P, SP)
        bad = active & ~(pSp > 0)
        breakdown |= bad
        active &= ~bad
        a = active
        alpha = rr[a] / pSp[a]
        X[a] += alpha[:, None] * P[a]
        R[a] -= alpha[:, None] * SP[a]
        rr_new = np.einsum("ij,ij->i", R[a], R[a])
        iters[a] += 1
        if record_history:
            history[t, a] = np.sqrt(rr_new)
        done = np.sqrt(rr_new) <= thresh[a]
        beta = rr_new / rr[a]
        idx = np.flatnonzero(a)
        P[idx] = R[idx] + beta[:, None] * P[idx]
        rr[idx] = rr_new
        converged[idx[done]] = True
        active[idx[done]] = False

    if warn and (breakdown.any() or (~converged).any()):
        warnings.warn(
            f"CG: {int((~converged).sum())} of {n} rows not converged after {T} iterations "
            f"({int(breakdown.sum())} with non-positive curvature)",
            CGConvergenceWarning,
            stacklevel=2,
        )
    return CGResult(X=X, converged=converged, breakdown=breakdown, iterations=iters,
                    residual_norm=np.sqrt(rr), history=history)


def sigma_dense(Q, K_blocks: Sequence[np.ndarray], stats: CenteredStats, lam, h: float) -> np.ndarray:
    """Materialize ``Sigma_i`` for the rows of ``Q`` as a ``(rows, d, d)`` array.

    The second moment ``sum_j w~_ij k_j k_j^T`` is formed as one GEMM of the
    weight tile against the packed upper triangles of ``k_j k_j^T``, then
    centered with the first moments. Memory is ``O(rows * d^2)``.
    """
    Q = as_matrix(Q, "Q")
    _check_stats(Q, K_blocks, stats, h)
    n, d = Q.shape
    lam = lambda_vector(lam, n)
    iu, ju = np.triu_indices(d)
    packed = np.zeros((n, iu.size))
    for _, Kc, L in block_logits(Q, K_blocks, h, kind=stats.kind, causal=stats.causal,
                                 row_offset=stats.row_offset):
        W = np.exp(L - stats.run_max[:, None])
        packed += W @ (Kc[:, iu] * Kc[:, ju])
    S = np.empty((n, d, d))
    S[:, iu, ju] = packed
    S[:, ju, iu] = packed
    mq = stats.mu_tilde[:, :, None] * Q[:, None, :]
    S -= mq + mq.transpose(0, 2, 1)
    S += stats.omega[:, None, None] * (Q[:, :, None] * Q[:, None, :])
    S[:, np.arange(d), np.arange(d)] += lam[:, None]
    return S


def direct_solve(Y, Q, K_blocks: Sequence[np.ndarray], stats: CenteredStats, lam, h: float) -> np.ndarray:
    """Exact counterpart of :func:`cg_solve` using :func:`sigma_dense`."""
    Y = as_matrix(Y, "Y")
    S = sigma_dense(Q, K_blocks, stats, lam, h)
    return np.linalg.solve(S, Y[:, :, None])[:, :, 0]
