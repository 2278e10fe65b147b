"""Local linear attention: reference, blockwise and interpolated forwards plus the backward.

For query ``q_i`` the output is the intercept of a kernel-weighted ridge
regression of values on centered keys ``z_ij = k_j - q_i``:

    O_i = sum_j s_ij v_j,   s_ij = w_ij (1 - z_ij . rho_i) / (omega_i - mu_i . rho_i)

with ``rho_i = Sigma_i^{-1} mu_i``. All paths work with max-shifted weights
``w~_ij = w_ij exp(-m_i)``; the quotient above is homogeneous in ``w`` so
only the scale at which the ridge term lives is affected (see
``LLAConfig.strict_lambda``).
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Union

import numpy as np

from .cg import CGConfig, CGConvergenceWarning, cg_solve, direct_solve, lambda_vector
from .primitives import (
    CenteredStats,
    accumulate_stats,
    block_logits,
    default_bandwidth,
    kernel_logits,
    relmm,
    split_blocks,
)
from .tensor import as_matrix


class SingularSystemError(np.linalg.LinAlgError):
    def __init__(self, rows):
        self.rows = np.atleast_1d(rows)
        super().__init__(f"Sigma_i is singular for rows {self.rows.tolist()}; use lambda > 0")


class DegenerateDenominatorError(ArithmeticError):
    def __init__(self, rows):
        self.rows = np.atleast_1d(rows)
        super().__init__(f"denominator omega_i - mu_i.rho_i vanished for rows {self.rows.tolist()}")


DELTA_FLOOR = 1e-12


@dataclass(frozen=True)
class LLAConfig:
    """Hyper-parameters shared by the forward and backward passes.

    ``h=None`` means ``2 * sqrt(d)``. ``lam`` is a scalar or one value per
    query position. With ``strict_lambda=False`` (default) the ridge term is
    added to the max-shifted system; with ``True`` it is rescaled by
    ``exp(-m_i)`` so that it regularizes the unshifted weights exactly.
    ``solver`` picks conjugate gradients or a dense per-block solve in the
    blockwise paths.
    """

    h: Optional[float] = None
    lam: object = 1.0
    cg: CGConfig = field(default_factory=CGConfig)
    block_rows: int = 64
    block_cols: int = 64
    causal: bool = True
    kernel: str = "exp"
    strict_lambda: bool = False
    solver: str = "cg"

    def __post_init__(self):
        if self.block_rows < 1 or self.block_cols < 1:
            raise ValueError("block sizes must be >= 1")
        if self.h is not None and not self.h > 0:
            raise ValueError("bandwidth h must be positive")
        if self.solver not in ("cg", "direct"):
            raise ValueError(f"unknown solver {self.solver!r}")

    def bandwidth(self, d: int) -> float:
        return float(self.h) if self.h is not None else default_bandwidth(d)

    def with_(self, **changes) -> "LLAConfig":
        return replace(self, **changes)


@dataclass
class LLAForwardCache:
    R: np.ndarray
    delta: np.ndarray
    run_max: np.ndarray
    arg_max: np.ndarray
    omega: np.ndarray
    mu: np.ndarray
    lam_eff: np.ndarray
    converged: np.ndarray
    h: float


@dataclass
class GradientBundle:
    dQ: np.ndarray
    dK: np.ndarray
    dV: np.ndarray


def _check_inputs(Q, K, V, cfg: LLAConfig):
    Q = as_matrix(Q, "Q")
    K = as_matrix(K, "K")
    V = as_matrix(V, "V")
    if K.shape[0] != V.shape[0]:
        raise ValueError(f"K has {K.shape[0]} rows but V has {V.shape[0]}")
    if Q.shape[1] != K.shape[1]:
        raise ValueError(f"Q and K feature dims differ: {Q.shape[1]} vs {K.shape[1]}")
    if cfg.causal and Q.shape[0] != K.shape[0]:
        raise ValueError("causal attention needs as many queries as keys")
    if K.shape[0] == 0:
        raise ValueError("at least one key is required")
    return Q, K, V


def _effective_lambda(cfg: LLAConfig, n: int, run_max: np.ndarray) -> np.ndarray:
    lam = lambda_vector(cfg.lam, n)
    if cfg.strict_lambda:
        lam = lam * np.exp(-run_max)
    return lam


def _check_delta(delta, omega, offset=0):
    bad = ~(np.abs(delta) >= DELTA_FLOOR * np.maximum(omega, 1.0))
    if bad.any():
        raise DegenerateDenominatorError(offset + np.flatnonzero(bad))


def _shift_vector(logit_shift, n):
    if logit_shift is None:
        return np.zeros(n)
    c = np.asarray(logit_shift, dtype=np.float64)
    c = np.full(n, float(c)) if c.ndim == 0 else c
    if c.shape != (n,) or not np.all(np.isfinite(c)):
        raise ValueError(f"logit_shift must be finite, scalar or length {n}")
    return c


def lla_weights_naive(Q, K, V, cfg: LLAConfig = LLAConfig(), logit_shift=None):
    """Dense reference: returns the full affine weight matrix ``S`` and the cache.

    Materializes all pairwise differences, ``O(n^2 d)`` memory; meant as an
    oracle for small problems.

    ``logit_shift`` subtracts ``c_i`` from every logit of row ``i``. The
    running max moves with it, so the max-shifted weights are unchanged and
    only the strict ridge ``lam * exp(-m_i)`` sees the shift. The cache keeps
    the unshifted max so the backward can recompute weights from ``Q, K``.
    """
    Q, K, V = _check_inputs(Q, K, V, cfg)
    m_q, d = Q.shape
    h = cfg.bandwidth(d)
    L = kernel_logits(Q, K, h, kind=cfg.kernel, causal=cfg.causal)
    arg_max = np.argmax(L, axis=1)
    run_max = L[np.arange(m_q), arg_max]
    W = np.exp(L - run_max[:, None])
    Z = K[None, :, :] - Q[:, None, :]
    omega = W.sum(axis=1)
    WZ = W[:, :, None] * Z
    mu = WZ.sum(axis=1)
    lam = _effective_lambda(cfg, m_q, run_max - _shift_vector(logit_shift, m_q))
    Sigma = np.matmul(WZ.transpose(0, 2, 1), Z)
    del WZ
    Sigma[:, np.arange(d), np.arange(d)] += lam[:, None]
    try:
        R = np.linalg.solve(Sigma, mu[:, :, None])[:, :, 0]
    except np.linalg.LinAlgError:
        bad = [i for i in range(m_q) if np.linalg.matrix_rank(Sigma[i]) < d]
        raise SingularSystemError(bad) from None
    delta = omega - np.einsum("ij,ij->i", mu, R)
    _check_delta(delta, omega)
    S = W * (1.0 - np.einsum("ijk,ik->ij", Z, R)) / delta[:, None]
    cache = LLAForwardCache(R=R, delta=delta, run_max=run_max, arg_max=arg_max, omega=omega,
                            mu=mu, lam_eff=lam, converged=np.ones(m_q, dtype=bool), h=h)
    return S, cache


def lla_forward_naive(Q, K, V, cfg: LLAConfig = LLAConfig(), logit_shift=None):
    """Reference forward with dense per-row solves of ``Sigma_i``."""
    S, cache = lla_weights_naive(Q, K, V, cfg, logit_shift)
    return S @ as_matrix(V, "V"), cache


def _solve_rows(Y, Qr, K_blocks, stats, lam, h, cfg: LLAConfig):
    if cfg.solver == "direct":
        return direct_solve(Y, Qr, K_blocks, stats, lam, h), np.ones(Y.shape[0], dtype=bool)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", CGConvergenceWarning)
        res = cg_solve(Y, Qr, K_blocks, stats, replace(cfg.cg, lam=lam), h)
    return res.X, res.converged


def _row_stats(cache: LLAForwardCache, Qr, sl: slice, cfg: LLAConfig, n_keys: int) -> CenteredStats:
    omega = cache.omega[sl]
    mu = cache.mu[sl]
    return CenteredStats(omega=omega, mu_tilde=mu + omega[:, None] * Qr, mu=mu,
                         run_max=cache.run_max[sl], arg_max=cache.arg_max[sl],
                         degenerate=np.zeros(omega.shape[0], dtype=bool), h=cache.h,
                         kind=cfg.kernel, causal=cfg.causal, row_offset=sl.start, n_keys=n_keys)


def lla_forward_blockwise(Q, K, V, cfg: LLAConfig = LLAConfig(), logit_shift=None):
    """Blockwise three-pass forward.

    Per query block: (1) stream key blocks to accumulate ``omega``, ``mu``
    and the running max; (2) solve ``Sigma_i rho_i = mu_i``; (3) stream key
    and value blocks again to form the output. Working memory is
    ``O(B_r * B_c + n * d)``. ``logit_shift`` as in :func:`lla_weights_naive`.
    """
    Q, K, V = _check_inputs(Q, K, V, cfg)
    m_q, d = Q.shape
    h = cfg.bandwidth(d)
    K_blocks = split_blocks(K, cfg.block_cols)
    V_blocks = split_blocks(V, cfg.block_cols)
    O = np.zeros((m_q, V.shape[1]))
    R = np.zeros((m_q, d))
    delta = np.zeros(m_q)
    run_max = np.zeros(m_q)
    arg_max = np.zeros(m_q, dtype=np.int64)
    omega = np.zeros(m_q)
    mu = np.zeros((m_q, d))
    lam_all = np.zeros(m_q)
    converged = np.ones(m_q, dtype=bool)
    lam_in = lambda_vector(cfg.lam, m_q)
    shift = _shift_vector(logit_shift, m_q)

    for r0 in range(0, m_q, cfg.block_rows):
        sl = slice(r0, min(r0 + cfg.block_rows, m_q))
        Qr = Q[sl]
        stats = accumulate_stats(Qr, K_blocks, h, causal=cfg.causal, kind=cfg.kernel, row_offset=r0)
        lam = lam_in[sl] * np.exp(shift[sl] - stats.run_max) if cfg.strict_lambda else lam_in[sl]
        Rr, conv = _solve_rows(stats.mu, Qr, K_blocks, stats, lam, h, cfg)
        dr = stats.omega - np.einsum("ij,ij->i", stats.mu, Rr)
        _check_delta(dr, stats.omega, r0)
        Or = np.zeros((Qr.shape[0], V.shape[1]))
        for col, Kc, L in block_logits(Qr, K_blocks, h, kind=cfg.kernel, causal=cfg.causal,
                                       row_offset=r0):
            W = np.exp(L - stats.run_max[:, None])
            S = (1.0 - relmm(Rr, Qr, Kc)) * W / dr[:, None]
            Or += S @ V_blocks[col // cfg.block_cols]
        O[sl] = Or
        R[sl] = Rr
        delta[sl] = dr
        run_max[sl] = stats.run_max
        arg_max[sl] = stats.arg_max
        omega[sl] = stats.omega
        mu[sl] = stats.mu
        lam_all[sl] = lam
        converged[sl] = conv

    if not converged.all():
        warnings.warn(f"CG did not converge for {int((~converged).sum())} of {m_q} rows",
                      CGConvergenceWarning, stacklevel=2)
    cache = LLAForwardCache(R=R, delta=delta, run_max=run_max, arg_max=arg_max, omega=omega,
                            mu=mu, lam_eff=lam_all, converged=converged, h=h)
    return O, cache


WHatSource = Union[np.ndarray, Callable[[int], np.ndarray]]


def lla_forward_interpolated(Q, K, V, W_hat: WHatSource, cfg: LLAConfig = LLAConfig()) -> np.ndarray:
    """Residual form: local-constant fit of ``v_j - W_i k_j`` plus ``W_i q_i``.

    ``W_hat`` is a ``(n, d_v, d)`` array or a callable returning the slope
    for position ``i``. ``W_hat = 0`` is softmax attention; the optimal
    local slope gives back the full local linear estimate.
    """
    from .baselines import softmax_attention

    Q, K, V = _check_inputs(Q, K, V, cfg)
    m_q, d = Q.shape
    h = cfg.bandwidth(d)
    if callable(W_hat):
        W_hat = np.stack([np.asarray(W_hat(i), dtype=np.float64) for i in range(m_q)])
    W_hat = np.asarray(W_hat, dtype=np.float64)
    if W_hat.shape != (m_q, V.shape[1], d):
        raise ValueError(f"W_hat must have shape {(m_q, V.shape[1], d)}, got {W_hat.shape}")
    kw = dict(causal=cfg.causal, kind=cfg.kernel, block_cols=cfg.block_cols)
    SV = softmax_attention(Q, K, V, h, **kw)
    if not W_hat.any():
        return SV
    SK = softmax_attention(Q, K, K, h, **kw)
    return SV + np.einsum("ivd,id->iv", W_hat, Q - SK)


def lla_backward(Q, K, V, cache: LLAForwardCache, dO, cfg: LLAConfig = LLAConfig()) -> GradientBundle:
    """Gradients of ``<dO, O>`` with respect to ``Q``, ``K`` and ``V``.

    Weights are recomputed tile by tile from ``Q``, ``K`` and the cached
    running max; the only extra linear solve per row is
    ``u_i = Sigma_i^{-1} sum_j c_ij z_ij`` with the forward's shifted system.
    Because the ridge term is tied to the shifted scale (unless
    ``strict_lambda``), the gradient also flows through the row max.
    """
    Q, K, V = _check_inputs(Q, K, V, cfg)
    dO = as_matrix(dO, "dO")
    m_q, d = Q.shape
    if dO.shape != (m_q, V.shape[1]):
        raise ValueError(f"dO must have shape {(m_q, V.shape[1])}")
    h = cache.h
    rbf = cfg.kernel == "rbf"
    K_blocks = split_blocks(K, cfg.block_cols)
    n_keys = K.shape[0]
    dQ = np.zeros_like(Q)
    dK = np.zeros_like(K)
    dV = np.zeros_like(V)
    conv_all = np.ones(m_q, dtype=bool)

    def tiles(Qr, r0, Rr, dr, mr):
        for col, Kc, L in block_logits(Qr, K_blocks, h, kind=cfg.kernel, causal=cfg.causal,
                                       row_offset=r0):
            csl = slice(col, col + Kc.shape[0])
            W = np.exp(L - mr[:, None])
            relR = relmm(Rr, Qr, Kc)
            S = (1.0 - relR) * W / dr[:, None]
            yield csl, Kc, W, relR, S

    for r0 in range(0, m_q, cfg.block_rows):
        sl = slice(r0, min(r0 + cfg.block_rows, m_q))
        Qr, Gr = Q[sl], dO[sl]
        Rr, dr, mr = cache.R[sl], cache.delta[sl], cache.run_max[sl]

        # pass 1: beta_i and the right-hand side of the u-system
        gs = np.zeros(Qr.shape[0])
        csum = np.zeros(Qr.shape[0])
        cK = np.zeros_like(Qr)
        for csl, Kc, W, relR, S in tiles(Qr, r0, Rr, dr, mr):
            Gam = Gr @ V[csl].T
            C = Gam * W / dr[:, None]
            gs += np.einsum("ij,ij->i", Gam, S)
            csum += C.sum(axis=1)
            cK += C @ Kc
        beta = gs / dr
        stats = _row_stats(cache, Qr, sl, cfg, n_keys)
        U, conv = _solve_rows(cK - csum[:, None] * Qr, Qr, K_blocks, stats, cache.lam_eff[sl], h, cfg)
        conv_all[sl] = conv
        d_mu = 2.0 * beta[:, None] * Rr - U
        A = beta[:, None] * Rr - U

        # pass 2: gradients through the weights and through z_ij
        dL_rsum = np.zeros(Qr.shape[0])
        zq = np.zeros_like(Qr)
        for csl, Kc, W, relR, S in tiles(Qr, r0, Rr, dr, mr):
            Gam = Gr @ V[csl].T
            C = Gam * W / dr[:, None]
            relD = relmm(d_mu, Qr, Kc)
            relA = relmm(A, Qr, Kc)
            dL = Gam * S + W * (relD - beta[:, None] - relR * relA)
            dV[csl] += S.T @ Gr
            WR = W * relR
            WA = W * relA
            dK[csl] += -C.T @ Rr + W.T @ d_mu - WR.T @ A - WA.T @ Rr
            zq += (-C.sum(axis=1)[:, None] * Rr + W.sum(axis=1)[:, None] * d_mu
                   - WR.sum(axis=1)[:, None] * A - WA.sum(axis=1)[:, None] * Rr)
            dL_rsum += dL.sum(axis=1)
            if rbf:
                dQ[sl] += (2.0 / h) * (dL @ Kc - dL.sum(axis=1)[:, None] * Qr)
                dK[csl] += (2.0 / h) * (dL.T @ Qr - dL.sum(axis=0)[:, None] * Kc)
            else:
                dQ[sl] += dL @ Kc / h
                dK[csl] += dL.T @ Qr / h
        dQ[sl] -= zq

        # the row max feeds w~ = exp(l - m) and, in strict mode, lam * exp(-m)
        dm = -dL_rsum
        if cfg.strict_lambda:
            dlam = np.einsum("ij,ij->i", U, Rr) - beta * np.einsum("ij,ij->i", Rr, Rr)
            dm -= cache.lam_eff[sl] * dlam
        js = cache.arg_max[sl]
        Ks = K[js]
        if rbf:
            dQ[sl] += (2.0 / h) * dm[:, None] * (Ks - Qr)
            np.add.at(dK, js, (2.0 / h) * dm[:, None] * (Qr - Ks))
        else:
            dQ[sl] += dm[:, None] * Ks / h
            np.add.at(dK, js, dm[:, None] * Qr / h)

    if not conv_all.all():
        warnings.warn(f"CG did not converge in the backward u-system for "
                      f"{int((~conv_all).sum())} rows", CGConvergenceWarning, stacklevel=2)
    return GradientBundle(dQ=dQ, dK=dK, dV=dV)
