import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from sgdd.analysis import total_variation
from sgdd.diffusion import (
    DegenerateStateError,
    TabularPrior,
    beta_of_sigma,
    concrete_score,
    euler_step,
    forward_noise_sample,
    heat_kernel_logpmf,
    marginal_at_sigma,
    one_dim_kernel,
    reverse_euler_sample,
    sigma_grid,
)
from sgdd.statespace import DomainError, StateSpace, make_rng

from oracles import series_expm


def random_joint(N, D, seed):
    rng = np.random.default_rng(seed)
    return TabularPrior("joint", rng.dirichlet(np.ones(N**D)).reshape((N,) * D))


def test_beta_examples():
    assert beta_of_sigma(0.0, 7) == 0.0
    assert beta_of_sigma(50.0, 2) == pytest.approx(0.5, abs=1e-15)
    assert beta_of_sigma(math.log(2), 2) == pytest.approx(0.25, abs=1e-15)
    with pytest.raises(DomainError):
        beta_of_sigma(-1.0, 2)


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 50), st.integers(2, 100))
def test_beta_range(sigma, N):
    b = beta_of_sigma(sigma, N)
    assert 0 <= b <= (N - 1) / N  # strict mathematically; equal once exp(-sigma) underflows


def test_heat_kernel_examples():
    assert heat_kernel_logpmf([1, 2], [1, 2], 0.0, 4) == 0.0
    for tok in (0, 1):
        assert heat_kernel_logpmf([tok], [0], 60.0, 2) == pytest.approx(math.log(0.5), abs=1e-12)


def test_heat_kernel_matches_matrix_exponential():
    N, D, sigma = 5, 3, 0.7
    Q = np.ones((N, N)) / N - np.eye(N)
    P = series_expm(sigma * Q)  # column-stochastic: P[j, i] = p(j | i)
    rng = np.random.default_rng(0)
    x0 = rng.integers(0, N, D)
    states = StateSpace(N, D).enumerate()
    oracle = np.log(np.prod(P[states, x0[None, :]], axis=1))
    ours = heat_kernel_logpmf(states, x0, sigma, N)
    assert np.max(np.abs(ours - oracle)) <= 1e-10
    np.testing.assert_allclose(one_dim_kernel(sigma, N), P, atol=1e-13)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 4), st.integers(1, 4), st.floats(0.01, 10))
def test_heat_kernel_normalized(N, D, sigma):
    states = StateSpace(N, D).enumerate()
    x0 = states[len(states) // 2]
    total = np.exp(heat_kernel_logpmf(states, x0, sigma, N)).sum()
    assert abs(total - 1) <= 1e-10


def test_marginal_examples():
    prior = TabularPrior.from_factors([[0.9, 0.1]])
    np.testing.assert_allclose(marginal_at_sigma(prior, math.log(2)).tables, [[0.7, 0.3]], atol=1e-15)
    np.testing.assert_allclose(marginal_at_sigma(prior, 0.0).tables, prior.tables, atol=0)
    joint = random_joint(3, 2, 1)
    assert total_variation(marginal_at_sigma(joint, 50.0).tables, np.full((3, 3), 1 / 9)) <= 1e-9


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 5), st.floats(0, 5), st.integers(0, 1000))
def test_marginal_semigroup(s1, s2, seed):
    q = np.random.default_rng(seed).dirichlet(np.ones(6))
    prior = TabularPrior.from_factors([q])
    two_step = marginal_at_sigma(marginal_at_sigma(prior, s1), s2).tables
    direct = marginal_at_sigma(prior, s1 + s2).tables
    assert np.max(np.abs(two_step - direct)) <= 1e-12


def test_concrete_score_examples():
    x = np.array([0, 3, 1])
    np.testing.assert_allclose(concrete_score(TabularPrior.uniform(4, 3), x, 0.3), 1.0)
    prior = TabularPrior.from_factors([[0.9, 0.1]])
    assert concrete_score(prior, [0], 0.0)[0, 1] == pytest.approx(1 / 9, rel=1e-13)


def test_concrete_score_joint_matches_enumeration():
    prior = random_joint(3, 2, 2)
    sigma = 0.5
    K = one_dim_kernel(sigma, 3)
    p_sigma = K @ prior.tables @ K.T  # kernel is symmetric, applied on both axes
    for x in StateSpace(3, 2).enumerate():
        r = concrete_score(prior, x, sigma)
        for d in range(2):
            for v in range(3):
                nb = x.copy()
                nb[d] = v
                expected = p_sigma[tuple(nb)] / p_sigma[tuple(x)]
                assert abs(r[d, v] - expected) <= 1e-12 * max(1, expected)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 4), st.integers(1, 3), st.floats(1e-3, 10), st.integers(0, 10**6))
def test_concrete_score_joint_equals_factorized(N, D, sigma, seed):
    rng = np.random.default_rng(seed)
    fact = TabularPrior.from_factors(rng.dirichlet(np.ones(N), size=D))
    joint = fact.as_joint()
    x = rng.integers(0, N, (5, D))
    err = np.max(np.abs(concrete_score(joint, x, sigma) - concrete_score(fact, x, sigma)))
    assert err <= 1e-12 * np.max(concrete_score(fact, x, sigma))


def test_concrete_score_degenerate_state():
    table = np.zeros((2, 2))
    table[0, 0] = 1.0
    prior = TabularPrior("joint", table)
    with pytest.raises(DegenerateStateError):
        concrete_score(prior, [1, 1], 0.0)


def test_prior_validation():
    with pytest.raises(DomainError):
        TabularPrior.from_factors([[0.5, 0.6]])
    with pytest.raises(DomainError):
        TabularPrior("product", [[0.5, 0.5]])


def test_prior_roundtrip(tmp_path):
    prior = random_joint(2, 3, 5)
    prior.save(tmp_path / "p.json")
    back = TabularPrior.load(tmp_path / "p.json")
    np.testing.assert_array_equal(back.tables, prior.tables)


def test_sigma_grid():
    g = sigma_grid(20.0, 4)
    assert g[0] == 20.0 and g[-1] == pytest.approx(1e-5)
    assert np.all(np.diff(g) < 0)
    assert sigma_grid(1e-6, 2)[-1] == pytest.approx(1e-7)
    with pytest.raises(DomainError):
        sigma_grid(1.0, 0)


def test_euler_uniform_stays_uniform():
    prior = TabularPrior.uniform(5, 2)
    rng = make_rng(0)
    x = reverse_euler_sample(prior, StateSpace(5, 2).uniform(10000, rng), 5.0, 10, rng)
    counts = np.bincount(x[:, 0], minlength=5)
    assert stats.chisquare(counts).pvalue > 0.01


def test_euler_recovers_skewed_prior():
    prior = TabularPrior.from_factors([[0.99, 0.01]])
    rng = make_rng(1)
    start = StateSpace(2, 1).uniform(50000, rng)
    x = reverse_euler_sample(prior, start, 20.0, 20, rng)
    assert abs(np.mean(x == 0) - 0.99) <= 0.01


def test_euler_error_shrinks_with_steps():
    prior = random_joint(3, 2, 3)
    n = 40000
    tvs = []
    for H in (1, 4, 64):
        rng = make_rng(H)
        x = reverse_euler_sample(prior, StateSpace(3, 2).uniform(n, rng), 20.0, H, rng)
        emp = np.bincount(x[:, 0] * 3 + x[:, 1], minlength=9) / n
        tvs.append(total_variation(emp, prior.tables.ravel()))
    assert tvs[0] > tvs[1] > tvs[2]
    assert tvs[2] <= 0.02


def test_euler_step_capping_keeps_valid_distribution():
    prior = random_joint(3, 2, 4)
    rng = make_rng(2)
    x = StateSpace(3, 2).uniform(1000, rng)
    out = euler_step(prior, x, 20.0, 19.0, rng)  # masses far above one
    assert out.shape == x.shape and out.max() < 3


def test_forward_noise():
    rng = make_rng(3)
    x0 = np.zeros(1000, dtype=np.uint16)
    np.testing.assert_array_equal(forward_noise_sample(x0, 0.0, 2, rng), x0)
    flips = np.mean(forward_noise_sample(x0, math.log(2), 2, rng) != 0)
    assert abs(flips - 0.25) <= 0.03
    big = forward_noise_sample(np.zeros((20000, 1), dtype=np.uint16), 60.0, 4, rng)
    assert stats.chisquare(np.bincount(big[:, 0], minlength=4)).pvalue > 0.01
