"""Piecewise-linear path costs, bottlenecks and weight tiers."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gsp_routing.network import REFERENCE_SPEC
from gsp_routing.plq import (
    PATH_CLASSES,
    PATH_LEN,
    SEGMENT_SERVER,
    GspParams,
    bottlenecks,
    make_state,
    path_weights,
    q_batch,
    q_values,
    tier_batch,
    weight_exponents,
)

states = st.lists(st.integers(0, 60), min_size=7, max_size=7).map(lambda v: np.array(v, dtype=np.int64))
betas = st.floats(1.001, 2.0)


def q_reference(x, beta):
    """Direct transcription of the three max-expressions."""
    x1a, x1b, x2, x3, x4, x5b, x5c = (float(v) for v in x)
    return (
        max(beta**2 * x1a, beta * (x1a + x2)),
        max(beta**2 * x1b, beta * (x1b + x3), x1b + x3 + x5b),
        max(beta**2 * x4, beta * (x4 + x5c)),
    )


def test_empty_state():
    assert tuple(q_values(np.zeros(7, dtype=int), 1.2)) == (0.0, 0.0, 0.0)
    assert bottlenecks(np.zeros(7, dtype=int), 1.2) == (2, 5, 5)


def test_q_examples():
    assert q_values(make_state(x1_12=2, x2_12=3), 1.2)[0] == pytest.approx(6.0)
    assert q_values(make_state(x1_135=4), 1.2)[1] == pytest.approx(5.76)


def test_bottleneck_examples():
    assert bottlenecks(make_state(x1_12=2, x2_12=3), 1.2)[0] == 2
    # 1.2**2 * 5 == 1.2 * 6: the tie resolves downstream
    assert bottlenecks(make_state(x1_12=5, x2_12=1), 1.2)[0] == 2
    assert bottlenecks(make_state(x1_12=5), 1.2)[0] == 1
    assert bottlenecks(make_state(x1_135=4), 1.2)[1] == 1
    assert bottlenecks(make_state(x3_135=4), 1.2)[1] == 3
    assert bottlenecks(make_state(x5_135=4, x4_45=1), 1.2) == (2, 5, 4)


def test_weight_examples():
    g = 1.1
    np.testing.assert_allclose(path_weights((2, 5, 5), REFERENCE_SPEC, g), (g, 1, 1))
    np.testing.assert_allclose(path_weights((2, 5, 4), (0.2,) * 5, g), (1, 1, 1))
    # mu2 > mu4 > mu5
    rates = (0.3, 0.4, 0.3, 0.3, 0.2)
    np.testing.assert_allclose(path_weights((2, 5, 4), rates, g), (1, g**2, g))


def test_weight_ties_share_tier():
    rates = (0.5, 0.3, 0.4, 0.3, 0.2)
    assert tuple(weight_exponents((1, 3, 4), rates)) == (0, 1, 2)
    assert tuple(weight_exponents((2, 3, 4), rates)) == (1, 0, 1)
    assert tuple(weight_exponents((2, 5, 4), rates)) == (0, 1, 0)


def test_params_validation():
    GspParams(1.2, 1.1)
    for b, g in [(1.1, 1.2), (1.2, 1.0), (1.0, 0.9)]:
        with pytest.raises(ValueError):
            GspParams(b, g)


def definition_bottleneck(x, beta, p, h=1e-9):
    """Server whose class has positive right derivative while the next one has none."""
    x = x.astype(float)
    base = q_values(x, beta)[p]
    deriv = []
    for s in range(PATH_LEN[p]):
        y = x.copy()
        y[PATH_CLASSES[p, s]] += h
        deriv.append((q_values(y, beta)[p] - base) / h)
    found = [
        SEGMENT_SERVER[p, s]
        for s in range(PATH_LEN[p])
        if deriv[s] > 0.5 and (s == PATH_LEN[p] - 1 or deriv[s + 1] < 0.5)
    ]
    assert len(found) == 1
    return int(found[0])


@settings(max_examples=200, deadline=None)
@given(x=states, beta=betas)
def test_q_matches_reference(x, beta):
    np.testing.assert_allclose(q_values(x, beta), q_reference(x, beta), rtol=1e-13)


@settings(max_examples=200, deadline=None)
@given(x=states, beta=betas)
def test_bottleneck_matches_right_derivative(x, beta):
    b = bottlenecks(x, beta)
    for p in range(3):
        if q_values(x, beta)[p] > 0:
            assert b[p] == definition_bottleneck(x, beta, p)


@settings(max_examples=200, deadline=None)
@given(x=states, beta=betas, k=st.integers(0, 6))
def test_monotone_and_homogeneous(x, beta, k):
    q = q_values(x, beta)
    np.testing.assert_allclose(q_values(k * x, beta), k * q, rtol=1e-12, atol=1e-12)
    for c in range(7):
        y = x.copy()
        y[c] += 1
        assert np.all(q_values(y, beta) >= q - 1e-12)
    sums = [x[[0, 2]].sum(), x[[1, 3, 5]].sum(), x[[4, 6]].sum()]
    assert np.all(q >= np.array(sums) - 1e-12)
    assert all((q[p] == 0) == (sums[p] == 0) for p in range(3))


@settings(max_examples=200, deadline=None)
@given(B=st.tuples(st.sampled_from([1, 2]), st.sampled_from([1, 3, 5]), st.sampled_from([4, 5])),
       rates=st.lists(st.sampled_from([0.1, 0.15, 0.2, 0.25]), min_size=5, max_size=5),
       gamma=st.floats(1.01, 2.0))
def test_weights_tiers(B, rates, gamma):
    w = path_weights(B, rates, gamma)
    assert np.any(w == 1.0)
    assert all(any(np.isclose(v, t) for t in (1.0, gamma, gamma**2)) for v in w)
    r = np.array([rates[b - 1] for b in B])
    # faster bottleneck never gets a larger weight
    for i in range(3):
        for j in range(3):
            if r[i] > r[j]:
                assert w[i] < w[j]


def test_batch_matches_scalar():
    rng = np.random.default_rng(1)
    X = rng.integers(0, 30, size=(200, 7))
    Q, B, _ = q_batch(X, 1.15)
    E = tier_batch(B, REFERENCE_SPEC.rates)
    for i in range(len(X)):
        np.testing.assert_allclose(Q[i], q_values(X[i], 1.15))
        assert tuple(B[i]) == bottlenecks(X[i], 1.15)
        assert tuple(E[i]) == tuple(weight_exponents(B[i], REFERENCE_SPEC.rates))
