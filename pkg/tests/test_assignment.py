import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oaxe.assignment import (
    AssignmentError,
    brute_force_assignment,
    is_permutation,
    solve_assignment,
    solve_assignment_batch,
)


def square_matrices(max_n=6):
    return st.integers(1, max_n).flatmap(
        lambda n: arrays(np.float64, (n, n), elements=st.floats(-10, 10, allow_nan=False))
    )


def test_identity_case():
    cost = 1.0 - np.eye(3)
    mapping, total = solve_assignment(cost)
    assert mapping.tolist() == [0, 1, 2]
    assert total == 0.0


def test_single_element_brute_force():
    mapping, total = brute_force_assignment([[3.5]])
    assert mapping.tolist() == [0]
    assert total == 3.5


def test_two_by_two_diagonal_brute_force():
    mapping, total = brute_force_assignment([[0.0, 1.0], [1.0, 0.0]])
    assert mapping.tolist() == [0, 1]
    assert total == 0.0


def test_rotated_sentence_matching():
    # target "I ate pizza this afternoon"; position i predicts the rotated order
    words = ["I", "ate", "pizza", "this", "afternoon"]
    predicted = ["this", "afternoon", "I", "ate", "pizza"]
    probs = np.full((5, 5), 0.025)
    for i, w in enumerate(predicted):
        probs[i, words.index(w)] = 0.9
    mapping, _ = solve_assignment(-np.log(probs))
    assert [words[j] for j in mapping] == predicted


def test_matches_enumeration_on_random_matrices():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        n = int(rng.integers(1, 8))
        cost = rng.uniform(-10, 10, size=(n, n))
        best = min(sum(cost[i, p[i]] for i in range(n)) for p in itertools.permutations(range(n)))
        mapping, total = solve_assignment(cost)
        assert is_permutation(mapping, n)
        assert total == pytest.approx(best, abs=1e-9)


def test_five_by_five_cross_check():
    cost = np.random.default_rng(3).normal(size=(5, 5))
    assert solve_assignment(cost)[1] == brute_force_assignment(cost)[1]


@settings(max_examples=200, deadline=None)
@given(square_matrices())
def test_bijection_and_cost_consistency(cost):
    mapping, total = solve_assignment(cost)
    assert is_permutation(mapping, cost.shape[0])
    assert total == pytest.approx(sum(cost[i, j] for i, j in enumerate(mapping)), rel=1e-15, abs=1e-12)
    assert total == pytest.approx(brute_force_assignment(cost)[1], rel=1e-12, abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(square_matrices(), st.data())
def test_row_shift_changes_cost_by_constant(cost, data):
    n = cost.shape[0]
    row = data.draw(st.integers(0, n - 1))
    shift = data.draw(st.floats(-5, 5, allow_nan=False))
    shifted = cost.copy()
    shifted[row] += shift
    _, base = brute_force_assignment(cost)
    _, moved = brute_force_assignment(shifted)
    assert moved == pytest.approx(base + shift, abs=1e-9)
    # the optimum of the shifted problem is still optimal for the original one
    mapping, _ = solve_assignment(shifted)
    assert sum(cost[i, j] for i, j in enumerate(mapping)) == pytest.approx(base, abs=1e-9)


def test_duplicate_columns_have_unique_optimal_cost():
    rng = np.random.default_rng(11)
    for _ in range(50):
        cost = rng.uniform(0, 5, size=(5, 5))
        cost[:, 3] = cost[:, 1]
        mapping, total = solve_assignment(cost)
        swapped = mapping.copy()
        a, b = np.flatnonzero(mapping == 1)[0], np.flatnonzero(mapping == 3)[0]
        swapped[a], swapped[b] = 3, 1
        assert total == pytest.approx(sum(cost[i, j] for i, j in enumerate(swapped)), abs=1e-12)
        assert total == pytest.approx(brute_force_assignment(cost)[1], abs=1e-12)


def test_large_matrix_polynomial_time():
    rng = np.random.default_rng(0)
    cost = rng.uniform(size=(200, 200))
    mapping, total = solve_assignment(cost)
    assert is_permutation(mapping, 200)
    # a perturbed identity should never beat the solver
    assert total <= np.trace(cost)


@pytest.mark.parametrize(
    "bad",
    [np.zeros((0, 0)), np.zeros((2, 3)), np.array([[0.0, np.nan], [1.0, 0.0]]),
     np.array([[np.inf]]), np.zeros(3)],
)
def test_rejects_invalid_input(bad):
    with pytest.raises(AssignmentError):
        solve_assignment(bad)


def test_brute_force_size_limit():
    with pytest.raises(AssignmentError):
        brute_force_assignment(np.zeros((10, 10)))


def test_batch_solver_matches_single_calls():
    rng = np.random.default_rng(5)
    lengths = np.array([3, 7, 1, 5])
    costs = rng.uniform(-3, 3, size=(4, 7, 7))
    out = solve_assignment_batch(costs, lengths)
    for b, n in enumerate(lengths):
        mapping, total = solve_assignment(costs[b, :n, :n])
        assert out[b, :n].tolist() == mapping.tolist()
        assert out[b, n:].tolist() == list(range(n, 7))


def test_batch_solver_rejects_nan():
    costs = np.zeros((1, 3, 3))
    costs[0, 1, 2] = np.nan
    with pytest.raises(AssignmentError):
        solve_assignment_batch(costs, np.array([3]))
