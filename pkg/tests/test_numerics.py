import math
import zlib

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from taskmoe import numerics as nx
from taskmoe.errors import DegenerateInputError, DimensionError, NumericalError


def triple_loop(a, b):
    m, k = a.shape
    p = b.shape[1]
    out = np.zeros((m, p))
    for i in range(m):
        for j in range(p):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


def test_matmul_identity_and_zero():
    m = np.arange(9.0).reshape(3, 3)
    assert np.array_equal(nx.matmul(np.eye(3), m), m)
    assert np.array_equal(nx.matmul(m, np.zeros((3, 2))), np.zeros((3, 2)))


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((4, 5)), rng.standard_normal((5, 3))
    assert np.max(np.abs(nx.matmul(a, b) - triple_loop(a, b))) < 1e-12


def test_matmul_shape_error():
    with pytest.raises(DimensionError):
        nx.matmul(np.zeros((2, 3)), np.zeros((4, 2)))


def test_softmax_closed_forms():
    assert np.allclose(nx.softmax(np.zeros(3)), [1 / 3] * 3, atol=1e-15)
    assert np.allclose(nx.softmax(np.array([math.log(2), 0.0])), [2 / 3, 1 / 3], atol=1e-15)


def test_softmax_extended_precision_oracle():
    rng = np.random.default_rng(2)
    x = rng.uniform(-5, 5, 12)
    mpmath.mp.dps = 40
    ex = [mpmath.exp(mpmath.mpf(float(v))) for v in x]
    tot = mpmath.fsum(ex)
    ref = np.array([float(e / tot) for e in ex])
    got = nx.softmax(x)
    assert np.max(np.abs(got - ref) / ref) < 1e-12


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.integers(1, 4096), elements=st.floats(-700, 700)))
def test_softmax_sums_to_one(x):
    y = nx.softmax(x)
    assert np.all(y >= 0)
    assert abs(y.sum() - 1.0) < 1e-12


def test_l2_normalize_examples():
    assert np.allclose(nx.l2_normalize(np.array([[3.0, 4.0]])), [[0.6, 0.8]], atol=1e-15)
    u = np.array([[0.0, 1.0, 0.0]])
    assert np.array_equal(nx.l2_normalize(u), u)
    with pytest.raises(DegenerateInputError):
        nx.l2_normalize(np.array([[1.0, 0.0], [0.0, 0.0]]))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-1e3, 1e3)), st.floats(1e-3, 1e3))
def test_l2_normalize_unit_and_scale_invariant(x, c):
    if np.any(np.linalg.norm(x, axis=1) < 1e-6):
        return
    y = nx.l2_normalize(x)
    assert np.allclose(np.linalg.norm(y, axis=1), 1.0, atol=1e-12)
    assert np.max(np.abs(nx.l2_normalize(c * x) - y)) < 1e-12


def naive_attention(q, k, v):
    b, h, n, dh = q.shape
    out = np.zeros_like(q)
    for bi in range(b):
        for hi in range(h):
            for i in range(n):
                s = [sum(q[bi, hi, i, t] * k[bi, hi, j, t] for t in range(dh)) / math.sqrt(dh)
                     for j in range(n)]
                mx = max(s)
                w = [math.exp(v_ - mx) for v_ in s]
                z = sum(w)
                for j in range(n):
                    out[bi, hi, i] += w[j] / z * v[bi, hi, j]
    return out


def test_attention_examples():
    rng = np.random.default_rng(3)
    v = rng.standard_normal((1, 2, 1, 4))
    assert np.array_equal(nx.attention_core(rng.standard_normal(v.shape), rng.standard_normal(v.shape), v), v)
    v = rng.standard_normal((1, 2, 5, 4))
    out = nx.attention_core(np.zeros_like(v), rng.standard_normal(v.shape), v)
    assert np.allclose(out, v.mean(axis=2, keepdims=True).repeat(5, axis=2), atol=1e-15)
    q, k, v = (rng.standard_normal((1, 2, 5, 4)) for _ in range(3))
    assert np.max(np.abs(nx.attention_core(q, k, v) - naive_attention(q, k, v))) < 1e-12


def test_attention_shape_error():
    with pytest.raises(DimensionError):
        nx.attention_core(np.zeros((1, 1, 2, 3)), np.zeros((1, 1, 3, 3)), np.zeros((1, 1, 2, 3)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_attention_permutation_equivariant(seed):
    rng = np.random.default_rng(seed)
    q, k, v = (rng.standard_normal((2, 2, 6, 3)) for _ in range(3))
    perm = rng.permutation(6)
    out = nx.attention_core(q, k, v)
    outp = nx.attention_core(q[:, :, perm], k[:, :, perm], v[:, :, perm])
    assert np.max(np.abs(outp - out[:, :, perm])) < 1e-12


def test_fd_linear_map_is_exact():
    rng = np.random.default_rng(4)
    w = rng.standard_normal((3, 5))
    c = rng.standard_normal(3)
    x = rng.standard_normal(5)
    rep = nx.finite_diff_check(lambda z: float(c @ (w @ z)), x, w.T @ c, probes=5, tolerance=1e-9)
    assert rep.passed and rep.max_rel_error < 1e-9


def test_fd_softmax():
    rng = np.random.default_rng(5)
    x = rng.uniform(-2, 2, 7)
    c = rng.standard_normal(7)
    rep = nx.finite_diff_check(lambda z: float(c @ nx.softmax(z)), x, nx.softmax_vjp(nx.softmax(x), c),
                               probes=7, tolerance=1e-6)
    assert rep.passed


def test_fd_reports_failure_and_rejects_nonfinite():
    x = np.ones(3)
    rep = nx.finite_diff_check(lambda z: float(z.sum()), x, 2 * np.ones(3), probes=3)
    assert not rep.passed
    with pytest.raises(NumericalError):
        nx.finite_diff_check(lambda z: float(z.sum()), x, np.array([1.0, np.nan, 1.0]))


@pytest.mark.parametrize("name", sorted(nx.REGISTRY))
def test_registered_ops_pass_at_100_points(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    for _ in range(100):
        rep = nx.check_registered(name, rng, probes=4, tolerance=1e-4)
        assert rep.passed, rep
