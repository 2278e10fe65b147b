import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from flashlla.cg import CGConfig, CGConvergenceWarning, cg_solve, direct_solve, sigma_dense, sigma_matvec
from flashlla.primitives import accumulate_stats, kernel_weights, split_blocks
from conftest import qkv, rand


def pairwise_sigma(Q, K, stats, lam, h, kind="exp"):
    """Dense Sigma_i from materialized z_ij and the stats' shifted weights."""
    W = kernel_weights(Q, K, h, stats.causal, shift=stats.run_max, kind=kind)
    n, d = Q.shape
    out = np.empty((n, d, d))
    for i in range(n):
        S = lam[i] * np.eye(d)
        for j in range(K.shape[0]):
            z = K[j] - Q[i]
            S += W[i, j] * np.outer(z, z)
        out[i] = S
    return out


def setup(seed, n, d, block=3, h=None, kind="exp"):
    Q, K, _ = qkv(seed, n, d, scale=1.0)
    h = h or 2 * np.sqrt(d)
    Kb = split_blocks(K, block)
    return Q, K, Kb, accumulate_stats(Q, Kb, h, kind=kind), h


def test_matvec_no_keys_is_lambda():
    P = rand(0, 3, 4)
    Q = rand(1, 3, 4)
    s = accumulate_stats(Q, [], 1.0)
    np.testing.assert_allclose(sigma_matvec(P, Q, [], s, 1.0, 1.0), P)


def test_matvec_single_key_at_query():
    q = rand(2, 1, 3)
    s = accumulate_stats(q, [q], 1.0)
    P = rand(3, 1, 3)
    np.testing.assert_allclose(sigma_matvec(P, q, [q], s, 2.0, 1.0), 2 * P, atol=1e-14)


@pytest.mark.parametrize("kind", ["exp", "rbf"])
def test_matvec_matches_pairwise(kind):
    Q, K, Kb, s, h = setup(4, 8, 4, kind=kind)
    lam = np.full(8, 0.7)
    P = rand(5, 8, 4)
    dense = pairwise_sigma(Q, K, s, lam, h, kind)
    np.testing.assert_allclose(sigma_matvec(P, Q, Kb, s, lam, h), np.einsum("nij,nj->ni", dense, P),
                               atol=1e-10)
    np.testing.assert_allclose(sigma_dense(Q, Kb, s, lam, h), dense, atol=1e-12)


def test_matvec_rejects_inconsistent_stats():
    Q, K, Kb, s, h = setup(6, 8, 4)
    with pytest.raises(ValueError):
        sigma_matvec(rand(0, 8, 4), Q, Kb, s, 1.0, h * 2)
    with pytest.raises(ValueError):
        sigma_matvec(rand(0, 8, 4), Q, Kb[:-1], s, 1.0, h)
    with pytest.raises(ValueError):
        sigma_matvec(rand(0, 7, 4), Q[:7], Kb, s, 1.0, h)


@given(st.integers(1, 16), st.integers(1, 8), st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2 ** 32 - 1))
def test_matvec_linearity(n, d, a, b, seed):
    Q, K, Kb, s, h = setup(seed, n, d)
    P1, P2 = rand(seed + 1, n, d), rand(seed + 2, n, d)
    lhs = sigma_matvec(a * P1 + b * P2, Q, Kb, s, 0.5, h)
    rhs = a * sigma_matvec(P1, Q, Kb, s, 0.5, h) + b * sigma_matvec(P2, Q, Kb, s, 0.5, h)
    np.testing.assert_allclose(lhs, rhs, atol=1e-11 * max(1.0, np.abs(lhs).max()))


def test_cg_lambda_identity():
    Y = rand(7, 4, 3)
    Q = rand(8, 4, 3)
    s = accumulate_stats(Q, [], 1.0)
    res = cg_solve(Y, Q, [], s, CGConfig(lam=2.5), 1.0)
    np.testing.assert_allclose(res.X, Y / 2.5, rtol=1e-14)
    assert res.converged.all()


def test_cg_zero_rhs():
    Q, K, Kb, s, h = setup(9, 6, 3)
    res = cg_solve(np.zeros((6, 3)), Q, Kb, s, CGConfig(), h)
    np.testing.assert_array_equal(res.X, 0.0)
    np.testing.assert_array_equal(res.iterations, 0)
    assert res.converged.all()


def test_cg_small_random_matches_dense():
    Q, K, Kb, s, h = setup(10, 8, 4)
    res = cg_solve(s.mu, Q, Kb, s, CGConfig(max_iters=4, tol=1e-10, lam=0.5), h)
    ref = direct_solve(s.mu, Q, Kb, s, 0.5, h)
    err = np.linalg.norm(res.X - ref, axis=1) / np.linalg.norm(ref, axis=1)
    assert err.max() < 1e-8


def test_cg_converged_rows_meet_contract():
    Q, K, Kb, s, h = setup(11, 32, 8)
    Y = rand(12, 32, 8)
    cfg = CGConfig(max_iters=8, tol=1e-6, lam=0.3)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", CGConvergenceWarning)
        res = cg_solve(Y, Q, Kb, s, cfg, h)
    r = np.linalg.norm(sigma_matvec(res.X, Q, Kb, s, 0.3, h) - Y, axis=1)
    ok = res.converged
    assert ok.any()
    assert np.all(r[ok] <= 1.0001 * cfg.tol * np.maximum(1.0, np.linalg.norm(Y[ok], axis=1)) + 1e-12)


def test_cg_warns_when_not_converged():
    Q, K, Kb, s, h = setup(13, 16, 8)
    with pytest.warns(CGConvergenceWarning):
        cg_solve(rand(14, 16, 8), Q, Kb, s, CGConfig(max_iters=1, tol=1e-14, lam=0.1), h)


def test_cg_breakdown_flag_on_indefinite_system():
    # lam negative-free but a zero-curvature system: no keys and lam = 0
    Q = rand(15, 2, 3)
    s = accumulate_stats(Q, [], 1.0)
    with pytest.warns(CGConvergenceWarning):
        res = cg_solve(rand(16, 2, 3), Q, [], s, CGConfig(lam=0.0), 1.0)
    assert res.breakdown.all()
    assert not res.converged.any()


def test_mask_safety():
    Q, K, Kb, s, h = setup(17, 12, 6)
    Y = rand(18, 12, 6)
    Y[:4] *= 1e-9  # these rows converge at once
    cfg = CGConfig(max_iters=6, tol=1e-6, lam=0.5)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", CGConvergenceWarning)
        res = cg_solve(Y, Q, Kb, s, cfg, h, record_history=True)
    early = np.flatnonzero(res.iterations < 6)
    for i in early:
        t = res.iterations[i]
        assert np.all(np.isnan(res.history[t + 1:, i]))
    # rerun with more iterations: rows already converged at iteration t stay bit-identical
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", CGConvergenceWarning)
        res2 = cg_solve(Y, Q, Kb, s, CGConfig(max_iters=12, tol=1e-6, lam=0.5), h)
    done = res.converged
    np.testing.assert_array_equal(res2.X[done], res.X[done])


def test_lambda_validation():
    with pytest.raises(ValueError):
        CGConfig(max_iters=0)
    with pytest.raises(ValueError):
        CGConfig(tol=-1e-3)
    CGConfig(tol=0.0)  # zero disables the early exit
    Q, K, Kb, s, h = setup(19, 4, 2)
    with pytest.raises(ValueError):
        cg_solve(rand(0, 4, 2), Q, Kb, s, CGConfig(lam=-1.0), h)
    with pytest.raises(ValueError):
        cg_solve(np.full((4, 2), np.nan), Q, Kb, s, CGConfig(), h)


def test_default_iterations():
    assert CGConfig().iterations(8) == 8
    assert CGConfig().iterations(100) == 32
    assert CGConfig(max_iters=5).iterations(100) == 5


def test_per_row_lambda():
    Q, K, Kb, s, h = setup(20, 6, 3)
    lam = np.linspace(0.1, 2.0, 6)
    res = cg_solve(s.mu, Q, Kb, s, CGConfig(max_iters=12, tol=1e-12, lam=lam), h)
    np.testing.assert_allclose(res.X, direct_solve(s.mu, Q, Kb, s, lam, h), rtol=1e-9, atol=1e-12)


@given(st.integers(1, 24), st.integers(1, 16), st.floats(0.1, 5.0), st.integers(0, 2 ** 32 - 1))
def test_exact_termination(n, d, lam, seed):
    Q, K, Kb, s, h = setup(seed, n, d)
    Y = rand(seed + 1, n, d)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", CGConvergenceWarning)
        res = cg_solve(Y, Q, Kb, s, CGConfig(max_iters=d, tol=1e-300, lam=lam), h)
    ref = direct_solve(Y, Q, Kb, s, lam, h)
    err = np.linalg.norm(res.X - ref, axis=1) / np.linalg.norm(ref, axis=1)
    assert err.max() <= 1e-7


@given(st.integers(1, 24), st.integers(2, 16), st.floats(0.1, 5.0), st.integers(0, 2 ** 32 - 1))
def test_monotone_residual(n, d, lam, seed):
    Q, K, Kb, s, h = setup(seed, n, d)
    Y = rand(seed + 1, n, d)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", CGConvergenceWarning)
        res = cg_solve(Y, Q, Kb, s, CGConfig(max_iters=d, tol=1e-10, lam=lam), h, record_history=True)
    H = res.history
    for t in range(1, H.shape[0]):
        live = ~np.isnan(H[t])
        assert np.all(H[t, live] <= H[t - 1, live] * (1 + 1e-9) + 1e-9)
