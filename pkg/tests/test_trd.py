import math

import numpy as np
import pytest

from mpqdm import trd
from mpqdm.trd import DistillConfig, FeatureTrace, SimilarityMap


def make_trace(maps, source="fp"):
    tr = FeatureTrace(source)
    for t, F in maps:
        tr.add(t, F)
    return tr


def kl_oracle(p, q):
    return sum(a * math.log(a / max(b, 1e-12)) for a, b in zip(p, q) if a > 0)


def central_diff(f, x, h=1e-4):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-8)


# trace and smoothing

def test_trace_rejects_bad_order_and_shape():
    tr = make_trace([(5, np.zeros((2, 3)))])
    with pytest.raises(ValueError):
        tr.add(5, np.zeros((2, 3)))
    with pytest.raises(ValueError):
        tr.add(4, np.zeros((3, 3)))
    with pytest.raises(trd.TraceError):
        tr[2]


def test_smooth_features_examples():
    A = np.random.default_rng(0).normal(size=(4, 3))
    tr = make_trace([(10, A), (9, -A), (8, 2 * A)])
    assert np.array_equal(trd.smooth_features(tr, 10, 0), A)
    assert np.array_equal(trd.smooth_features(tr, 10, 1), np.zeros_like(A))
    assert np.allclose(trd.smooth_features(tr, 10, 2), 2 * A)
    with pytest.raises(trd.TraceError):
        trd.smooth_features(tr, 10, 3)


def test_smooth_features_linear():
    rng = np.random.default_rng(1)
    As = [rng.normal(size=(4, 3)) for _ in range(3)]
    Bs = [rng.normal(size=(4, 3)) for _ in range(3)]
    a, b = 1.7, -0.3
    ts = (20, 19, 18)
    mix = make_trace([(t, a * x + b * y) for t, x, y in zip(ts, As, Bs)])
    lhs = trd.smooth_features(mix, 20, 2)
    rhs = a * trd.smooth_features(make_trace(zip(ts, As)), 20, 2) + b * trd.smooth_features(make_trace(zip(ts, Bs)), 20, 2)
    assert np.allclose(lhs, rhs, rtol=1e-12, atol=1e-12)


# similarity maps and KL

def test_similarity_examples():
    assert np.array_equal(trd.similarity_distributions(np.array([[3.0, 4.0]])).probs, [[1.0]])
    S = trd.similarity_distributions(np.array([[2.0, 0.0], [0.0, 5.0]])).probs
    e = math.e
    assert np.allclose(S, [[e / (e + 1), 1 / (e + 1)], [1 / (e + 1), e / (e + 1)]], atol=1e-12)
    assert S[0, 0] == pytest.approx(0.7311, abs=1e-4)


def test_similarity_rows_are_distributions():
    rng = np.random.default_rng(2)
    for _ in range(50):
        S = trd.similarity_distributions(rng.normal(size=(6, 4)), rng.uniform(0.2, 3)).probs
        assert np.all(S >= 0)
        assert np.allclose(S.sum(axis=1), 1.0, atol=1e-9)


def test_zero_row_is_guarded():
    S = trd.similarity_distributions(np.array([[0.0, 0.0], [1.0, 0.0]])).probs
    assert np.all(np.isfinite(S))


def test_scale_invariance_exact():
    rng = np.random.default_rng(3)
    for c in (2.0, 0.5, 4.0, 1024.0):
        F = rng.normal(size=(5, 3))
        a = trd.similarity_distributions(F).probs
        b = trd.similarity_distributions(c * F).probs
        assert np.array_equal(a, b)
        assert np.array_equal(a.argmax(axis=1), b.argmax(axis=1))


def test_scale_invariance_generic_factor():
    rng = np.random.default_rng(4)
    F = rng.normal(size=(5, 3))
    for c in (3.7, 0.013, 91.0):
        assert np.allclose(trd.similarity_distributions(F).probs,
                           trd.similarity_distributions(c * F).probs, rtol=1e-14, atol=1e-15)


def test_kl_examples():
    p = SimilarityMap(np.array([[0.7311, 0.2689]]))
    q = SimilarityMap(np.array([[0.5, 0.5]]))
    assert trd.relation_kl_loss(p, q) == pytest.approx(kl_oracle([0.7311, 0.2689], [0.5, 0.5]), abs=1e-12)
    # hand evaluation: 0.7311*ln(1.4622) + 0.2689*ln(0.5378)
    assert trd.relation_kl_loss(p, q) == pytest.approx(0.1110, abs=1e-4)
    assert trd.relation_kl_loss(p, p) == 0.0
    with pytest.raises(ValueError):
        trd.relation_kl_loss(p, SimilarityMap(np.ones((2, 2)) / 2))


def test_kl_nonnegative_and_zero_iff_equal():
    rng = np.random.default_rng(5)
    for _ in range(1000):
        s = int(rng.integers(1, 6))
        P = trd.similarity_distributions(rng.normal(size=(s, 3)))
        Q = trd.similarity_distributions(rng.normal(size=(s, 3)))
        loss = trd.relation_kl_loss(P, Q)
        assert loss >= 0
        assert trd.relation_kl_loss(P, P) == 0.0
        if not np.allclose(P.probs, Q.probs, atol=1e-9):
            assert loss > 0


def test_permutation_equivariance():
    rng = np.random.default_rng(6)
    for _ in range(20):
        Ff, Fq = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
        perm = rng.permutation(6)
        a = trd.relation_kl_loss(trd.similarity_distributions(Ff), trd.similarity_distributions(Fq))
        b = trd.relation_kl_loss(trd.similarity_distributions(Ff[perm]), trd.similarity_distributions(Fq[perm]))
        assert a == pytest.approx(b, rel=1e-12, abs=1e-15)


# gradients

def test_relation_kl_grad_matches_finite_differences():
    rng = np.random.default_rng(7)
    for _ in range(100):
        Ff, Fq = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
        temp = float(rng.uniform(0.5, 2.0))
        loss, g = trd.relation_kl_grad(Ff, Fq, temp)
        want = trd.relation_kl_loss(trd.similarity_distributions(Ff, temp), trd.similarity_distributions(Fq, temp))
        assert loss == pytest.approx(want, rel=1e-12, abs=1e-15)
        num = central_diff(lambda x: trd.relation_kl_grad(Ff, x, temp)[0], Fq)
        assert rel_err(g, num) <= 1e-4


def test_task_loss_grad_matches_finite_differences():
    rng = np.random.default_rng(8)
    for _ in range(100):
        f, q = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
        _, g = trd.task_loss_grad(f, q)
        num = central_diff(lambda x: trd.task_loss(f, x), q)
        assert rel_err(g, num) <= 1e-4


def test_l2_grad_matches_finite_differences():
    rng = np.random.default_rng(9)
    f, q = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    _, g = trd.l2_feature_grad(f, q)
    assert rel_err(g, central_diff(lambda x: trd.l2_feature_loss(f, x), q)) <= 1e-4


# scalar losses

def test_task_and_l2_examples():
    rng = np.random.default_rng(10)
    a = rng.normal(size=(7, 2))
    assert trd.task_loss(a, a) == 0.0
    assert trd.task_loss(a, a + 1) == pytest.approx(1.0, abs=1e-12)
    b = rng.normal(size=(7, 2))
    assert abs(trd.task_loss(a, b) - ((a - b) ** 2).sum() / a.size) <= 1e-12
    assert trd.l2_feature_loss(a, a) == 0.0
    assert trd.l2_feature_loss(a, a - 1) == pytest.approx(1.0, abs=1e-12)
    assert abs(trd.l2_feature_loss(a, b) - ((a - b) ** 2).sum() / a.size) <= 1e-12


def test_total_loss():
    assert trd.total_loss(1.0, 2.0, 0.5) == 2.0
    assert trd.total_loss(1.25, 7.0, 0.0) == 1.25


def test_distill_config():
    c = DistillConfig()
    assert (c.smooth_steps, c.lam, c.temperature) == (1, 100.0, 1.0)
    for bad in ({"smooth_steps": -1}, {"lam": -1.0}, {"temperature": 0.0}):
        with pytest.raises(ValueError):
            DistillConfig(**bad)
