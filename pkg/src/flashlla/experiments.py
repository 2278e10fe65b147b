"""Experiment runners behind the command line.

Every runner takes an :class:`ExperimentConfig`, is deterministic for a fixed
seed, and returns rows ready for CSV/JSON plus whatever summary the caller
needs for a pass/fail decision.

Replications are mapped over a thread pool (``LLA_THREADS`` caps the worker
count); results come back in replication order and are summed in that order,
so the output does not depend on scheduling.
"""
from __future__ import annotations

import os
import time
import tracemalloc
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .attention import (
    LLAConfig,
    lla_backward,
    lla_forward_blockwise,
    lla_forward_naive,
    lla_weights_naive,
)
from .baselines import (
    global_linear_fit,
    local_linear_estimate,
    mesanet,
    nadaraya_watson_estimate,
    softmax_attention,
    vanilla_la,
)
from .cg import CGConfig, CGConvergenceWarning
from .datagen import PiecewiseLinearTask, gen_iid_regression, gen_sequence, stream, uniform_ball
from .primitives import KERNELS, default_bandwidth

MODELS = ("lla", "softmax", "vanilla-la", "mesanet", "random")


@dataclass(frozen=True)
class ExperimentConfig:
    """Knobs shared by all runners; each runner reads the fields it needs.

    ``bandwidth`` fixes ``h`` outright; otherwise ``h = bandwidth_scale * sqrt(d)``.
    ``cg_iters=None`` means ``2 * d`` in the verification runners and
    ``min(d, 32)`` elsewhere.
    """

    command: str = "ttr"
    models: tuple = MODELS
    length: int = 1024
    segments: tuple = (256,)
    dims: tuple = (64,)
    noise: float = 0.1
    bandwidth: Optional[float] = None
    bandwidth_scale: float = 2.0
    lam: float = 1.0
    mesa_lam: Optional[float] = None
    kernel: str = "exp"
    solver: str = "direct"
    cg_iters: Optional[int] = None
    cg_tol: float = 1e-6
    block_rows: int = 64
    block_cols: int = 256
    reps: int = 100
    seed: int = 0
    threads: Optional[int] = None
    # ratecheck
    sizes: tuple = tuple(2 ** k for k in range(7, 14))
    n_eval: int = 400
    ll_ridge: float = 1e-8
    bandwidths: tuple = tuple(np.geomspace(3e-3, 0.3, 13))
    # equiv / gradcheck / bench-mem
    blocks: tuple = (1, 7, None)
    seeds: int = 10
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.reps < 1:
            raise ValueError("reps must be >= 1")
        bad = [m for m in self.models if m not in MODELS]
        if bad:
            raise ValueError(f"unknown model(s) {bad}; choose from {list(MODELS)}")
        if self.kernel not in KERNELS:
            raise ValueError(f"unknown kernel {self.kernel!r}; choose from {list(KERNELS)}")
        if self.solver not in ("cg", "direct"):
            raise ValueError(f"unknown solver {self.solver!r}; choose cg or direct")

    def h_for(self, d: int) -> float:
        if self.bandwidth is not None:
            return float(self.bandwidth)
        return self.bandwidth_scale / 2.0 * default_bandwidth(d)

    def lla_config(self, d: int, **over) -> LLAConfig:
        cg = CGConfig(max_iters=self.cg_iters, tol=self.cg_tol, lam=self.lam)
        base = LLAConfig(h=self.h_for(d), lam=self.lam, cg=cg, block_rows=self.block_rows,
                         block_cols=self.block_cols, kernel=self.kernel, solver=self.solver)
        return base.with_(**over) if over else base

    def with_(self, **changes) -> "ExperimentConfig":
        return replace(self, **changes)


def n_workers(cfg: ExperimentConfig) -> int:
    if cfg.threads is not None:
        return max(1, int(cfg.threads))
    env = os.environ.get("LLA_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def pool_map(fn: Callable, items: Sequence, cfg: ExperimentConfig) -> list:
    workers = min(n_workers(cfg), len(items)) or 1
    if workers == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


# --- test-time regression -----------------------------------------------------------------

@dataclass
class MSEReport:
    """Per-position aggregates per model plus per-replication totals.

    ``totals[model][r]`` is ``sum_i l_i`` for replication ``r``; it feeds the
    ratio statistics. ``losses`` holds the raw ``(reps, L)`` matrices only when
    requested.
    """

    d: int
    S: int
    n_reps: int
    mean: dict
    stderr: dict
    totals: dict
    losses: Optional[dict] = None

    def rows(self):
        for model, mean in self.mean.items():
            se = self.stderr[model]
            for i in range(mean.shape[0]):
                yield {"model": model, "d": self.d, "S": self.S, "position": i,
                       "mse_mean": float(mean[i]), "mse_stderr": float(se[i]), "n_reps": self.n_reps}

    def segment_means(self, model: str, lo: float, hi: float) -> np.ndarray:
        """Mean of the per-position MSE over the fraction ``[lo, hi)`` of each segment."""
        v = self.mean[model]
        a, b = int(round(lo * self.S)), int(round(hi * self.S))
        return np.array([v[c * self.S + a:c * self.S + b].mean() for c in range(v.shape[0] // self.S)])


def predict_sequence(model: str, K, V, cfg: ExperimentConfig, rng=None) -> np.ndarray:
    """Causal prediction of ``v_i`` from the pairs ``j <= i`` queried at ``k_i``."""
    d = K.shape[1]
    h = cfg.h_for(d)
    if model == "lla":
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", CGConvergenceWarning)
            O, _ = lla_forward_blockwise(K, K, V, cfg.lla_config(d))
        return O
    if model == "softmax":
        return softmax_attention(K, K, V, h, kind=cfg.kernel, block_cols=cfg.block_cols)
    if model == "vanilla-la":
        return vanilla_la(K, K, V)
    if model == "mesanet":
        return mesanet(K, K, V, cfg.mesa_lam if cfg.mesa_lam is not None else cfg.lam)
    if model == "random":
        return rng.standard_normal(V.shape)
    raise ValueError(f"unknown model {model!r}")


def _ttr_rep(task: PiecewiseLinearTask, cfg: ExperimentConfig, r: int) -> dict:
    s = gen_sequence(task, r)
    out = {}
    for model in cfg.models:
        # segment index 0 is never used by the generator, so this stream is disjoint
        rng = stream(task.seed, r, 0) if model == "random" else None
        err = predict_sequence(model, s.keys, s.values, cfg, rng) - s.values
        out[model] = np.einsum("ij,ij->i", err, err)
    return out


def run_ttr(cfg: ExperimentConfig, d: Optional[int] = None, S: Optional[int] = None,
            keep_losses: bool = False) -> MSEReport:
    d = cfg.dims[0] if d is None else d
    S = cfg.segments[0] if S is None else S
    task = PiecewiseLinearTask(L=cfg.length, S=S, d=d, noise=cfg.noise, seed=cfg.seed)
    per_rep = pool_map(lambda r: _ttr_rep(task, cfg, r), range(cfg.reps), cfg)
    mean, stderr, totals, losses = {}, {}, {}, {}
    n = cfg.reps
    for model in cfg.models:
        M = np.stack([p[model] for p in per_rep])
        mean[model] = M.mean(axis=0)
        stderr[model] = M.std(axis=0, ddof=1) / np.sqrt(n) if n > 1 else np.zeros(M.shape[1])
        totals[model] = M.sum(axis=1)
        if keep_losses:
            losses[model] = M
    return MSEReport(d=d, S=S, n_reps=n, mean=mean, stderr=stderr, totals=totals,
                     losses=losses if keep_losses else None)


def ratio_stats(num: np.ndarray, den: np.ndarray) -> tuple[float, float]:
    """Ratio of means and its delta-method standard error."""
    a, b = num.mean(), den.mean()
    r = a / b
    n = num.shape[0]
    if n < 2:
        return float(r), 0.0
    resid = num - r * den
    return float(r), float(resid.std(ddof=1) / np.sqrt(n) / b)


def run_ratio(cfg: ExperimentConfig) -> list[dict]:
    if "lla" not in cfg.models:
        cfg = cfg.with_(models=("lla",) + tuple(cfg.models))
    rows = []
    for d in cfg.dims:
        for S in cfg.segments:
            rep = run_ttr(cfg, d, S)
            base = rep.totals["lla"]
            for model in cfg.models:
                if model == "lla":
                    r, se = 1.0, 0.0
                else:
                    r, se = ratio_stats(rep.totals[model], base)
                rows.append({"model": model, "d": d, "S": S, "ratio": r, "ratio_stderr": se})
    return rows


# --- rate check ---------------------------------------------------------------------------

def loglog_slope(n, err) -> float:
    return float(np.polyfit(np.log(np.asarray(n, float)), np.log(np.asarray(err, float)), 1)[0])


def _rate_rep(n: int, X_eval, f_eval, cfg: ExperimentConfig, r: int):
    X, Y = gen_iid_regression(n, 2, "quadratic-disk", cfg.noise, seed=cfg.seed, rep=r)
    gl = float(np.mean((global_linear_fit(X, Y).predict(X_eval) - f_eval) ** 2))
    nw = np.empty(len(cfg.bandwidths))
    ll = np.empty(len(cfg.bandwidths))
    for k, h in enumerate(cfg.bandwidths):
        nw[k] = np.mean((nadaraya_watson_estimate(X, Y, X_eval, h) - f_eval) ** 2)
        ll[k] = np.mean((local_linear_estimate(X, Y, X_eval, h, cfg.ll_ridge) - f_eval) ** 2)
    return gl, nw, ll


def run_ratecheck(cfg: ExperimentConfig):
    """Best-bandwidth integrated squared error of GL, NW and LL versus ``n``.

    The integral over the unit disk is the average over ``n_eval`` fixed
    uniform points (area factor dropped). Returns ``(rows, slopes, levels)``.
    """
    X_eval = uniform_ball(stream(cfg.seed, 0, 0), cfg.n_eval, 2)
    f_eval = np.sum(X_eval ** 2, axis=1, keepdims=True)
    rows = []
    curves = {"gl": [], "nw": [], "ll": []}
    for n in cfg.sizes:
        reps = pool_map(lambda r: _rate_rep(n, X_eval, f_eval, cfg, r), range(cfg.reps), cfg)
        gl = float(np.mean([g for g, _, _ in reps]))
        nw = np.mean([v for _, v, _ in reps], axis=0)
        ll = np.mean([v for _, _, v in reps], axis=0)
        rows.append({"estimator": "gl", "n": n, "bandwidth": float("nan"), "imse": gl})
        for name, curve in (("nw", nw), ("ll", ll)):
            k = int(np.argmin(curve))
            rows.append({"estimator": name, "n": n, "bandwidth": float(cfg.bandwidths[k]),
                         "imse": float(curve[k])})
        for row in rows[-3:]:
            curves[row["estimator"]].append(row["imse"])
    slopes = {k: loglog_slope(cfg.sizes, v) for k, v in curves.items()}
    levels = {k: v[-1] for k, v in curves.items()}
    return rows, slopes, levels


def rate_verdicts(slopes: dict, levels: dict) -> dict:
    return {
        "gl_flat": abs(slopes["gl"]) < 0.1 and levels["gl"] > 10 * levels["ll"],
        "nw_rate": abs(slopes["nw"] + 0.6) <= 0.25,
        "ll_steeper": slopes["ll"] <= slopes["nw"] - 0.05,
    }


# --- verification runners -----------------------------------------------------------------

def random_qkv(seed: int, n: int, d: int, scale: Optional[float] = None):
    """O(1) inputs: entries ``N(0, 1) * d**-0.25`` so that ``q.k`` is O(1)."""
    rng = stream(seed, n, d)
    s = d ** -0.25 if scale is None else scale
    return tuple(rng.standard_normal((n, d)) * s for _ in range(3))


def run_equiv(cfg: ExperimentConfig, tol: float = 1e-6):
    """Blockwise versus dense-reference forward over an ``(n, d, block, seed)`` grid."""
    rows = []
    for n in cfg.sizes:
        for d in cfg.dims:
            T = cfg.cg_iters if cfg.cg_iters is not None else 2 * d
            for seed in range(cfg.seeds):
                Q, K, V = random_qkv(cfg.seed + seed, n, d)
                ref, _ = lla_forward_naive(Q, K, V, cfg.lla_config(d))
                for b in cfg.blocks:
                    b = n if b is None else b
                    lc = cfg.lla_config(d, block_rows=b, block_cols=b, solver="cg",
                                        cg=CGConfig(max_iters=T, tol=cfg.cg_tol, lam=cfg.lam))
                    with warnings.catch_warnings():
                        warnings.simplefilter("ignore", CGConvergenceWarning)
                        O, _ = lla_forward_blockwise(Q, K, V, lc)
                    dev = float(np.max(np.abs(O - ref)))
                    rows.append({"n": n, "d": d, "block": b, "seed": seed, "max_abs_dev": dev,
                                 "passed": dev <= tol})
    return rows, all(r["passed"] for r in rows)


def central_difference(f: Callable[[np.ndarray], float], X: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    G = np.empty_like(X)
    for idx in np.ndindex(X.shape):
        old = X[idx]
        X[idx] = old + eps
        fp = f(X)
        X[idx] = old - eps
        fm = f(X)
        X[idx] = old
        G[idx] = (fp - fm) / (2 * eps)
    return G


def rel_error(a, b) -> float:
    scale = max(float(np.max(np.abs(b))), 1e-12)
    return float(np.max(np.abs(a - b))) / scale


def gradcheck_case(Q, K, V, dO, lc: LLAConfig, eps: float = 1e-6) -> dict:
    _, cache = lla_forward_blockwise(Q, K, V, lc)
    g = lla_backward(Q, K, V, cache, dO, lc)

    def loss(which):
        def f(X):
            args = {"Q": Q, "K": K, "V": V}
            args[which] = X
            O, _ = lla_forward_naive(args["Q"], args["K"], args["V"], lc)
            return float(np.sum(O * dO))
        return f

    out = {}
    for name, X, G in (("dQ", Q, g.dQ), ("dK", K, g.dK), ("dV", V, g.dV)):
        fd = central_difference(loss(name[1]), X.copy(), eps)
        out[name] = rel_error(G, fd)
    return out


def run_gradcheck(cfg: ExperimentConfig, tol: float = 1e-4, tol_v: float = 1e-9):
    """Analytic gradients versus central differences of ``<dO, O>``."""
    rows = []
    ok = True
    for n in cfg.sizes:
        for d in cfg.dims:
            lc = cfg.lla_config(d, solver="direct", block_rows=3, block_cols=2)
            for seed in range(cfg.seeds):
                Q, K, V = random_qkv(cfg.seed + seed, n, d)
                dO = stream(cfg.seed + seed, n, d, 1).standard_normal((n, d))
                errs = gradcheck_case(Q, K, V, dO, lc)
                for name, e in errs.items():
                    limit = tol_v if name == "dV" else tol
                    rows.append({"n": n, "d": d, "seed": seed, "tensor": name, "rel_error": e,
                                 "passed": e < limit})
                    ok &= e < limit
            _, cache = lla_forward_blockwise(Q, K, V, lc)
            z = lla_backward(Q, K, V, cache, np.zeros_like(dO), lc)
            zmax = max(float(np.abs(x).max()) for x in (z.dQ, z.dK, z.dV))
            rows.append({"n": n, "d": d, "seed": -1, "tensor": "zero-dO", "rel_error": zmax,
                         "passed": zmax == 0.0})
            ok &= zmax == 0.0
    return rows, ok


def peak_bytes(fn: Callable[[], object]) -> tuple[int, float]:
    """Peak traced allocation (bytes) while ``fn`` runs, and its wall time."""
    tracemalloc.start()
    tracemalloc.reset_peak()
    base = tracemalloc.get_traced_memory()[0]
    t0 = time.perf_counter()
    try:
        fn()
    finally:
        peak = tracemalloc.get_traced_memory()[1]
        tracemalloc.stop()
    return peak - base, time.perf_counter() - t0


def run_benchmem(cfg: ExperimentConfig, naive_sizes: Iterable[int] = (128, 256, 512, 1024),
                 block_sizes: Iterable[int] = (1024, 2048, 4096, 8192)):
    """Peak auxiliary allocation of the dense reference and the blockwise forward.

    Inputs are allocated before tracing starts, so the figure covers only the
    working set. Returns ``(rows, slopes)`` with slopes keyed by ``(path, d)``.
    """
    rows = []
    slopes = {}
    for d in cfg.dims:
        lc = cfg.lla_config(d, solver="cg", cg=CGConfig(max_iters=cfg.cg_iters or 4, tol=1e-12,
                                                        lam=cfg.lam))
        for path, sizes in (("naive", naive_sizes), ("blockwise", block_sizes)):
            peaks = []
            for n in sizes:
                Q, K, V = random_qkv(cfg.seed, n, d)
                if path == "naive":
                    fn = lambda: lla_weights_naive(Q, K, V, lc)
                else:
                    def fn():
                        with warnings.catch_warnings():
                            warnings.simplefilter("ignore", CGConvergenceWarning)
                            lla_forward_blockwise(Q, K, V, lc)
                peak, wall = peak_bytes(fn)
                peaks.append(peak)
                rows.append({"path": path, "n": n, "d": d, "peak_aux_bytes": peak, "wall_time": wall})
            slopes[(path, d)] = loglog_slope(list(sizes), peaks)
    return rows, slopes
