"""Reference estimators: softmax / Nadaraya-Watson, linear attention, MesaNet,
global least squares and the non-causal local linear estimator."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .primitives import KERNELS, block_logits, kernel_logits, split_blocks
from .tensor import as_matrix, as_vector


def softmax_attention(Q, K, V, h: float, causal: bool = True, *, kind: str = "exp",
                      block_cols: int = 512) -> np.ndarray:
    """Kernel-weighted average of values (local constant fit), streamed over key blocks."""
    Q = as_matrix(Q, "Q")
    K = as_matrix(K, "K")
    V = as_matrix(V, "V")
    if K.shape[0] != V.shape[0]:
        raise ValueError("K and V must have the same number of rows")
    n = Q.shape[0]
    run_max = np.full(n, -np.inf)
    denom = np.zeros(n)
    acc = np.zeros((n, V.shape[1]))
    col = 0
    V_blocks = split_blocks(V, block_cols)
    for i, (col, Kc, L) in enumerate(block_logits(Q, split_blocks(K, block_cols), h, kind=kind,
                                                  causal=causal, row_offset=0)):
        m = np.maximum(run_max, L.max(axis=1))
        safe = np.where(np.isfinite(m), m, 0.0)
        alpha = np.exp(run_max - safe)
        W = np.exp(L - safe[:, None])
        denom = alpha * denom + W.sum(axis=1)
        acc = alpha[:, None] * acc + W @ V_blocks[i]
        run_max = m
    if np.any(denom == 0):
        raise ValueError("some queries have no keys in their context")
    return acc / denom[:, None]


@dataclass
class RecurrentState:
    """Running ``S = sum v k^T`` and ``H = sum k k^T + lam I``."""

    S: np.ndarray
    H: np.ndarray

    @classmethod
    def empty(cls, d_k: int, d_v: int, lam: float = 0.0) -> "RecurrentState":
        return cls(S=np.zeros((d_v, d_k)), H=lam * np.eye(d_k))

    def update(self, k, v) -> "RecurrentState":
        self.S += np.outer(v, k)
        self.H += np.outer(k, k)
        return self


def vanilla_la(Q, K, V, causal: bool = True, chunk: int = 64) -> np.ndarray:
    """Linear attention ``O_i = S_i q_i`` with ``S_i = sum_{j<=i} v_j k_j^T``.

    Runs chunk by chunk: the state carried between chunks is the recurrent
    ``S``; inside a chunk the causal part is a masked ``Q K^T`` product.
    """
    Q = as_matrix(Q, "Q")
    K = as_matrix(K, "K")
    V = as_matrix(V, "V")
    if not causal:
        return Q @ (V.T @ K).T
    n = Q.shape[0]
    S = np.zeros((V.shape[1], K.shape[1]))
    O = np.empty((n, V.shape[1]))
    for s in range(0, n, chunk):
        e = min(s + chunk, n)
        A = np.tril(Q[s:e] @ K[s:e].T)
        O[s:e] = Q[s:e] @ S.T + A @ V[s:e]
        S += V[s:e].T @ K[s:e]
    return O


def la_state_slopes(K, V) -> np.ndarray:
    """Linear-attention states ``S_i`` for every position, shape ``(n, d_v, d_k)``."""
    K = as_matrix(K, "K")
    V = as_matrix(V, "V")
    return np.cumsum(V[:, :, None] * K[:, None, :], axis=0)


def mesanet(Q, K, V, lam: float, causal: bool = True, chunk: int = 256) -> np.ndarray:
    """Per-position ridge prediction ``S_i H_i^{-1} q_i``."""
    Q = as_matrix(Q, "Q")
    K = as_matrix(K, "K")
    V = as_matrix(V, "V")
    if not lam > 0:
        raise np.linalg.LinAlgError("mesanet needs lam > 0 for a nonsingular H")
    d = K.shape[1]
    if not causal:
        H = K.T @ K + lam * np.eye(d)
        return np.linalg.solve(H, Q.T).T @ (V.T @ K).T
    n = Q.shape[0]
    O = np.empty((n, V.shape[1]))
    state = RecurrentState.empty(d, V.shape[1], lam)
    for s in range(0, n, chunk):
        e = min(s + chunk, n)
        Hs = state.H + np.cumsum(K[s:e, :, None] * K[s:e, None, :], axis=0)
        Ss = state.S + np.cumsum(V[s:e, :, None] * K[s:e, None, :], axis=0)
        x = np.linalg.solve(Hs, Q[s:e, :, None])
        O[s:e] = (Ss @ x)[:, :, 0]
        state = RecurrentState(S=Ss[-1].copy(), H=Hs[-1].copy())
    return O


def la_recall_mse(K, V) -> float:
    """Mean squared retrieval error of the final linear-attention state at the stored keys."""
    K = as_matrix(K, "K")
    V = as_matrix(V, "V")
    S = V.T @ K
    err = K @ S.T - V
    return float(np.mean(np.sum(err * err, axis=1)))


class GlobalLinearModel:
    """Affine least-squares predictor ``Y ~ b + X W^T``."""

    def __init__(self, coef: np.ndarray, intercept: np.ndarray):
        self.coef = coef
        self.intercept = intercept

    def predict(self, X) -> np.ndarray:
        return as_matrix(X, "X") @ self.coef.T + self.intercept


def global_linear_fit(X, Y, ridge: float = 1e-8) -> GlobalLinearModel:
    """Least-squares affine fit; falls back to a small ridge on the slope if rank deficient."""
    X = as_matrix(X, "X")
    Y = as_matrix(Y, "Y")
    n, d = X.shape
    D = np.hstack([np.ones((n, 1)), X])
    theta, _, rank, _ = np.linalg.lstsq(D, Y, rcond=None)
    if rank < d + 1:
        warnings.warn("rank-deficient design; using ridge-stabilized fit", RuntimeWarning, stacklevel=2)
        G = D.T @ D
        G[1:, 1:] += ridge * np.eye(d)
        theta = np.linalg.solve(G, D.T @ Y)
    return GlobalLinearModel(coef=theta[1:].T.copy(), intercept=theta[0].copy())


def _local_weights(X, x0, h, kind):
    L = kernel_logits(x0, X, h, kind=kind, causal=False)
    m = L.max(axis=1)
    return np.exp(L - m[:, None]), m


def nadaraya_watson_estimate(X, Y, x0, h: float, *, kind: str = "rbf") -> np.ndarray:
    """Local constant fit at each row of ``x0`` (or a single point)."""
    X = as_matrix(X, "X")
    Y = as_matrix(Y, "Y")
    single = np.ndim(x0) == 1
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    W, _ = _local_weights(X, x0, h, kind)
    out = (W @ Y) / W.sum(axis=1)[:, None]
    return out[0] if single else out


def local_linear_estimate(X, Y, x0, h: float, lam: float = 0.0, *, kind: str = "rbf",
                          chunk: int = 2048) -> np.ndarray:
    """Intercept of the kernel-weighted affine fit centered at ``x0``.

    Solves the weighted normal equations on the design ``[1, X_j - x0]``
    with ridge ``lam`` on the slope only, weights taken on their natural
    (unshifted) scale. ``x0`` may be one point or a matrix of points. The
    centered moments are assembled from uncentered ones, so memory is
    ``O(len(x0) * n)``.
    """
    if kind not in KERNELS:
        raise ValueError(f"unknown kernel {kind!r}")
    if lam < 0:
        raise ValueError("lam must be >= 0")
    X = as_matrix(X, "X")
    Y = as_matrix(Y, "Y")
    single = np.ndim(x0) == 1
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    d = X.shape[1]
    XX = (X[:, :, None] * X[:, None, :]).reshape(X.shape[0], d * d)
    XY = (X[:, :, None] * Y[:, None, :]).reshape(X.shape[0], -1)
    out = np.empty((x0.shape[0], Y.shape[1]))
    for s in range(0, x0.shape[0], chunk):
        q = x0[s:s + chunk]
        W, m = _local_weights(X, q, h, kind)
        om = W.sum(axis=1)
        WX = W @ X
        WY = W @ Y
        mu = WX - om[:, None] * q
        qx = q[:, :, None] * WX[:, None, :]
        Sig = ((W @ XX).reshape(-1, d, d) - qx - qx.transpose(0, 2, 1)
               + om[:, None, None] * (q[:, :, None] * q[:, None, :]))
        Sig[:, np.arange(d), np.arange(d)] += (lam * np.exp(-m))[:, None]
        G = np.empty((q.shape[0], d + 1, d + 1))
        G[:, 0, 0] = om
        G[:, 0, 1:] = mu
        G[:, 1:, 0] = mu
        G[:, 1:, 1:] = Sig
        rhs = np.empty((q.shape[0], d + 1, Y.shape[1]))
        rhs[:, 0] = WY
        rhs[:, 1:] = (W @ XY).reshape(-1, d, Y.shape[1]) - q[:, :, None] * WY[:, None, :]
        try:
            theta = np.linalg.solve(G, rhs)
        except np.linalg.LinAlgError:
            raise np.linalg.LinAlgError("singular local design; use lam > 0") from None
        out[s:s + chunk] = theta[:, 0, :]
    return out[0] if single else out
