import io
import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from flashlla.baselines import global_linear_fit
from flashlla.datagen import (
    MAGIC,
    PiecewiseLinearTask,
    gen_iid_regression,
    gen_sequence,
    quadratic_disk,
    read_binary,
    read_csv,
    sign_pattern,
    stream,
    to_bytes,
    uniform_ball,
    write_csv,
)


def test_sign_pattern_examples():
    np.testing.assert_array_equal(sign_pattern(1, 2), [1, 1])
    np.testing.assert_array_equal(sign_pattern(4, 2), [-1, -1])
    np.testing.assert_array_equal(sign_pattern(2, 2), [-1, 1])
    assert sign_pattern(1, 0).shape == (0,)


@pytest.mark.parametrize("m", range(0, 7))
def test_sign_pattern_injective(m):
    pats = {tuple(sign_pattern(c, m)) for c in range(1, 2 ** m + 1)}
    assert len(pats) == 2 ** m
    assert all(set(p) <= {-1.0, 1.0} for p in pats)


@pytest.mark.parametrize("c,m", [(0, 2), (5, 2), (1, -1)])
def test_sign_pattern_range(c, m):
    with pytest.raises(ValueError):
        sign_pattern(c, m)


@pytest.mark.parametrize("kw", [dict(L=10, S=4, d=2), dict(L=12, S=4, d=2), dict(L=16, S=2, d=2),
                                dict(L=4, S=4, d=0), dict(L=4, S=4, d=2, noise=-1.0)])
def test_task_validation(kw):
    with pytest.raises(ValueError):
        PiecewiseLinearTask(**kw)


def test_noiseless_segments_are_linear():
    task = PiecewiseLinearTask(L=64, S=16, d=4, noise=0.0, seed=3)
    s = gen_sequence(task, 2)
    for c in range(1, 5):
        sl = s.segment_ids == c
        K, V = s.keys[sl], s.values[sl]
        A, *_ = np.linalg.lstsq(K, V, rcond=None)
        assert np.abs(K @ A - V).max() < 1e-10
        np.testing.assert_allclose(A.T, s.A[c - 1], atol=1e-10)


@given(st.sampled_from([(32, 4), (32, 8), (64, 16), (64, 4)]), st.integers(2, 6), st.integers(0, 1000))
def test_keys_in_cones(LS, d, seed):
    L, S = LS
    task = PiecewiseLinearTask(L=L, S=S, d=max(d, 4), noise=0.1, seed=seed)
    s = gen_sequence(task)
    m = task.m
    for c in range(1, task.n_segments + 1):
        K = s.keys[s.segment_ids == c]
        assert np.all(np.sign(K[:, :m]) * sign_pattern(c, m) >= 0)
    # distinct segments never share an orthant in the first m coordinates
    for a, b in itertools.combinations(range(1, task.n_segments + 1), 2):
        assert np.any(sign_pattern(a, m) != sign_pattern(b, m))


def test_half_normal_mean():
    task = PiecewiseLinearTask(L=2 ** 17, S=2 ** 15, d=3, noise=0.0, seed=11)
    s = gen_sequence(task)
    mean = np.abs(s.keys[:100_000, :2]).mean(axis=0)
    np.testing.assert_allclose(mean, np.sqrt(2 / np.pi), rtol=0.01)


def test_unflipped_tail_is_symmetric():
    task = PiecewiseLinearTask(L=4096, S=1024, d=3, noise=0.0, seed=12)
    tail = gen_sequence(task).keys[:, 2]
    assert 0.45 < np.mean(tail > 0) < 0.55


def test_frozen_replay():
    s = gen_sequence(PiecewiseLinearTask(L=8, S=4, d=2, noise=0.1, seed=0), 0)
    assert s.keys[0].tolist() == [0.31776711821749026, -0.4821244625873273]
    assert s.values[0].tolist() == [0.25566514530455303, -0.056335266072555734]
    assert s.A[1, 0].tolist() == [1.5167561130856861, 0.8846485456841521]


def test_replay_independent_of_sample_count():
    task = PiecewiseLinearTask(L=32, S=8, d=3, seed=5)
    a = gen_sequence(task, 4)
    for r in range(4):
        gen_sequence(task, r)
    b = gen_sequence(task, 4)
    np.testing.assert_array_equal(a.keys, b.keys)
    np.testing.assert_array_equal(a.values, b.values)
    assert not np.array_equal(a.keys, gen_sequence(task, 3).keys)


def test_stream_is_philox():
    assert type(stream(0, 1, 2).bit_generator).__name__ == "Philox"
    assert stream(0, 1, 2).random() == stream(0, 1, 2).random()
    assert stream(0, 1, 2).random() != stream(0, 2, 1).random()


def test_csv_roundtrip():
    task = PiecewiseLinearTask(L=16, S=4, d=3, seed=1)
    samples = [gen_sequence(task, r) for r in range(3)]
    buf = io.StringIO()
    write_csv(samples, buf)
    assert buf.getvalue().splitlines()[0] == "sample,position,segment,k_0,k_1,k_2,v_0,v_1,v_2"
    buf.seek(0)
    back = read_csv(buf)
    assert len(back) == 3
    for a, b in zip(samples, back):
        np.testing.assert_array_equal(a.keys, b.keys)
        np.testing.assert_array_equal(a.values, b.values)
        np.testing.assert_array_equal(a.segment_ids, b.segment_ids)


def test_binary_roundtrip():
    task = PiecewiseLinearTask(L=16, S=8, d=2, seed=2)
    samples = [gen_sequence(task, r) for r in range(2)]
    raw = to_bytes(samples)
    assert raw[:4] == MAGIC
    back = read_binary(io.BytesIO(raw))
    for a, b in zip(samples, back):
        for f in ("keys", "values", "segment_ids", "A"):
            np.testing.assert_array_equal(getattr(a, f), getattr(b, f))


def test_binary_rejects_bad_input():
    raw = to_bytes([gen_sequence(PiecewiseLinearTask(L=4, S=4, d=2))])
    with pytest.raises(ValueError, match="magic"):
        read_binary(io.BytesIO(b"XXXX" + raw[4:]))
    with pytest.raises(ValueError, match="truncated"):
        read_binary(io.BytesIO(raw[:-3]))
    with pytest.raises(ValueError, match="truncated"):
        read_binary(io.BytesIO(raw[:10]))


def test_uniform_ball():
    X = uniform_ball(np.random.default_rng(0), 20000, 2)
    r = np.linalg.norm(X, axis=1)
    assert r.max() <= 1.0
    # area fraction inside radius 1/2 is 1/4
    assert abs(np.mean(r < 0.5) - 0.25) < 0.01


def test_iid_unknown_target():
    with pytest.raises(ValueError, match="unknown target"):
        gen_iid_regression(10, 2, f_id="sine")


def test_iid_custom_and_replay():
    X, Y = gen_iid_regression(50, 2, f_id=lambda Z: Z[:, :1] * 3, noise=0.0, seed=4)
    np.testing.assert_array_equal(Y, 3 * X[:, :1])
    X2, _ = gen_iid_regression(50, 2, f_id="affine", seed=4)
    np.testing.assert_array_equal(X, X2)


def test_affine_target_is_fit_exactly():
    X, Y = gen_iid_regression(200, 3, f_id="affine", noise=0.0, seed=6)
    m = global_linear_fit(X, Y)
    assert np.abs(m.predict(X) - Y).max() < 1e-12


def test_quadratic_not_affine():
    # the integrated squared error of the best affine fit stays near Var(|x|^2) = 1/12 on the disk
    errs = []
    X_eval = uniform_ball(stream(0, 0, 0), 20000, 2)
    for n in (200, 2000, 20000):
        X, Y = gen_iid_regression(n, 2, f_id="quadratic-disk", noise=0.1, seed=7)
        m = global_linear_fit(X, Y)
        errs.append(np.mean((m.predict(X_eval) - quadratic_disk(X_eval)) ** 2))
    assert min(errs) > 0.07
    np.testing.assert_allclose(errs[-1], 1 / 12, rtol=0.05)
