import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sgdd.statespace import DimensionError, DomainError, StateSpace
from sgdd.tasks import (
    ForwardModel,
    RewardFunction,
    Task,
    apply_forward,
    discretized_gaussian_prior,
    make_likelihood,
    make_reward_likelihood,
    make_task,
)


def test_gaussian_prior_shape():
    prior, grid = discretized_gaussian_prior(50, 2)
    pmf = prior.tables[0]
    assert grid[0] == -3.0 and grid[-1] == 3.0
    np.testing.assert_array_equal(pmf, pmf[::-1])
    assert np.argmax(pmf) in (24, 25)
    assert prior.tables.shape == (2, 50)


def test_forward_examples():
    pairs = np.array([[0, 1], [2, 3], [1, 3]])
    assert apply_forward(ForwardModel("and_pairs", pairs=pairs), np.zeros(4, dtype=int)).tolist() == [0, 0, 0]
    assert apply_forward(ForwardModel("xor_pairs", pairs=pairs), np.ones(4, dtype=int)).tolist() == [0, 0, 0]
    _, grid = discretized_gaussian_prior(50, 2)
    assert apply_forward(ForwardModel("l1_sum", values=grid), [0, 0]) == pytest.approx(6.0)
    assert apply_forward(ForwardModel("mask", keep=np.array([2, 0])), [5, 6, 7]).tolist() == [7, 5]


def test_forward_errors():
    with pytest.raises(DomainError):
        apply_forward(ForwardModel("l1_sum", values=np.arange(3.0)), [3])
    with pytest.raises(DomainError):
        ForwardModel("mask", keep=np.array([1, 1]))
    with pytest.raises(DomainError):
        ForwardModel("blur")


def test_likelihood_examples():
    task = make_task("xor", 2, 16, seed=3)
    f = task.likelihood()
    assert f(task.x_true) == 0.0
    z = task.x_true.copy()
    z[task.model.pairs[0, 0]] ^= 1
    violations = np.count_nonzero(apply_forward(task.model, z) != task.y)
    assert f(z) == pytest.approx(violations / 0.1)
    one = make_likelihood(ForwardModel("xor_pairs", pairs=np.array([[0, 1]])), np.array([0]), 0.1)
    assert one(np.array([1, 0])) == pytest.approx(10.0)
    l1 = make_likelihood(ForwardModel("l1_sum", values=np.array([0.0, 2.0])), 6.0, 1.0)
    assert l1(np.array([1, 1])) == pytest.approx(2.0)  # G(z) = 4
    with pytest.raises(DimensionError):
        make_likelihood(ForwardModel("xor_pairs", pairs=np.array([[0, 1]])), np.array([0, 1]))


def test_reward_examples():
    f = make_reward_likelihood(RewardFunction("linear_token_score", target=1), 2.0)
    assert f(np.array([1, 1, 0, 1])) == pytest.approx(-6.0)
    flat = make_reward_likelihood(RewardFunction(), 1e-12)
    assert np.all(np.abs(flat(StateSpace(2, 4).enumerate())) <= 4e-9)
    motif = RewardFunction("motif_count", motif=(1, 0))
    assert motif(np.array([1, 0, 1, 0, 0])) == 2.0
    with pytest.raises(DomainError):
        make_reward_likelihood(RewardFunction(), 0.0)


def test_popcount_tilted_mean():
    # closed form per-bit tilt versus enumeration of all 256 states
    task = make_task("reward", 2, 8, beta=1.0)
    states = task.space.enumerate()
    r = task.reward(states)
    w = np.exp(-task.likelihood()(states))
    assert np.sum(w * r) / np.sum(w) == pytest.approx(8 * math.e / (1 + math.e), rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.sampled_from(["xor", "and", "inpaint"]), st.integers(0, 10**6))
def test_zero_potential_iff_consistent(kind, seed):
    task = make_task(kind, 2, 8, seed=seed)
    f = task.likelihood()
    states = task.space.enumerate()
    consistent = np.all(apply_forward(task.model, states) == task.y, axis=1)
    np.testing.assert_array_equal(f(states) == 0, consistent)
    np.testing.assert_array_equal(apply_forward(task.model, states), apply_forward(task.model, states))


def test_make_task_fields():
    syn = make_task("synthetic", 50, 2, seed=7)
    assert syn.model.kind == "l1_sum" and syn.prior.form == "factorized"
    assert syn.y == pytest.approx(apply_forward(syn.model, syn.x_true))
    xor = make_task("xor", 2, 16, seed=3, gamma=2.0)
    assert xor.model.pairs.shape == (32, 2)
    assert np.all(xor.model.pairs[:, 0] != xor.model.pairs[:, 1])
    assert xor.model.pairs.min() >= 0 and xor.model.pairs.max() < 16
    with pytest.raises(DomainError):
        make_task("xor", 3, 4)
    with pytest.raises(DomainError):
        make_task("sudoku", 2, 4)


def test_task_seed_fixes_instance():
    a, b, c = make_task("and", 2, 12, seed=1), make_task("and", 2, 12, seed=1), make_task("and", 2, 12, seed=2)
    assert a.task_hash == b.task_hash != c.task_hash


def test_task_roundtrip_and_immutability(tmp_path):
    for task in (make_task("synthetic", 20, 3, seed=1), make_task("inpaint", 2, 6, seed=2),
                 make_task("reward", 2, 5, beta=0.5)):
        task.save(tmp_path / "t.json")
        back = Task.load(tmp_path / "t.json")
        assert back.task_hash == task.task_hash
        states = task.space.enumerate()
        np.testing.assert_array_equal(back.likelihood()(states), task.likelihood()(states))
    with pytest.raises(AttributeError):
        task.beta = 2.0
