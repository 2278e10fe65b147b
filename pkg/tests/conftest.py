import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


def rand(seed, *shape, scale=1.0):
    return np.random.default_rng(seed).standard_normal(shape) * scale


def qkv(seed, n, d, scale=None):
    rng = np.random.default_rng(seed)
    s = d ** -0.25 if scale is None else scale
    return tuple(rng.standard_normal((n, d)) * s for _ in range(3))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def wls_oracle(Q, K, V, lam, h, kind="exp", causal=True, shifted=True):
    """Intercept and slope of the weighted ridge fit, by dense normal equations.

    Objective per row: 1/2 sum_j w_ij |v_j - b - W z_ij|^2 + lam/2 |W|_F^2, so
    the slope block of the Gram matrix gets ``+lam I``. ``shifted`` uses the
    row-max-shifted weights.
    """
    from flashlla.primitives import kernel_logits

    n, d = Q.shape
    L = kernel_logits(Q, K, h, kind=kind, causal=causal)
    B = np.empty((n, V.shape[1]))
    Wsl = np.empty((n, V.shape[1], d))
    for i in range(n):
        w = np.exp(L[i] - (L[i].max() if shifted else 0.0))
        D = np.hstack([np.ones((K.shape[0], 1)), K - Q[i]])
        G = D.T @ (w[:, None] * D)
        G[1:, 1:] += lam * np.eye(d)
        theta = np.linalg.solve(G, D.T @ (w[:, None] * V))
        B[i] = theta[0]
        Wsl[i] = theta[1:].T
    return B, Wsl


# one line per acceptance criterion, printed after the run
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: (int(s.split()[1].rstrip(":ab")), s)):
            terminalreporter.write_line(line)
