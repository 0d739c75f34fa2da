import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oaxe import losses
from oaxe.assignment import brute_force_assignment
from oaxe.losses import (
    AnnealParams,
    LossInputError,
    anneal_temperature,
    build_cost_matrix,
    joint_loss,
    oaxe_loss,
    oaxe_truncated_loss,
    xe_loss,
)


def random_logp(rng, n, v, sharpness=3.0):
    logits = rng.normal(scale=sharpness, size=(n, v))
    return logits - np.log(np.exp(logits).sum(1, keepdims=True))


def naive_xe(logp, target):
    total = 0.0
    for i, tok in enumerate(target):
        total += -logp[i][tok]
    return total / len(target)


def oracle_oaxe(logp, target):
    return min(naive_xe(logp, [target[j] for j in perm])
               for perm in itertools.permutations(range(len(target))))


@st.composite
def problems(draw, max_n=6, max_v=8):
    n = draw(st.integers(1, max_n))
    v = draw(st.integers(1, max_v))
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    return random_logp(rng, n, v), rng.integers(0, v, size=n)


# ---------------------------------------------------------------- XE


def test_xe_perfect_prediction_is_zero():
    logp = np.full((3, 4), -np.inf)
    target = np.array([2, 0, 3])
    logp[np.arange(3), target] = 0.0
    assert xe_loss(logp, target).loss == 0.0


def test_xe_uniform_two_tokens():
    logp = np.full((2, 2), math.log(0.5))
    assert xe_loss(logp, [0, 1]).loss == pytest.approx(math.log(2), abs=1e-12)


def test_xe_matches_naive_sum():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n, v = int(rng.integers(1, 10)), int(rng.integers(1, 12))
        logp, target = random_logp(rng, n, v), rng.integers(0, v, size=n)
        res = xe_loss(logp, target)
        assert res.loss == pytest.approx(naive_xe(logp, target), abs=1e-10)
        assert res.ordering.tolist() == list(range(n))
        assert res.kept.all()
        expected = np.zeros((n, v))
        expected[np.arange(n), target] = -1.0 / n
        np.testing.assert_array_equal(res.grad, expected)


@pytest.mark.parametrize(
    "logp,target",
    [(np.zeros((2, 3)), [0]), (np.zeros((2, 3)), [0, 3]), (np.zeros((2, 3)), [-1, 0]),
     (np.zeros((0, 3)), [])],
)
def test_xe_rejects_bad_shapes(logp, target):
    with pytest.raises(LossInputError):
        xe_loss(logp, target)


# ---------------------------------------------------------------- cost matrix


def test_cost_matrix_single_token():
    logp = np.log([[0.25, 0.75]])
    np.testing.assert_allclose(build_cost_matrix(logp, [1]), [[-math.log(0.75)]])


def test_cost_matrix_duplicate_tokens_give_identical_columns():
    rng = np.random.default_rng(1)
    logp = random_logp(rng, 4, 6)
    cost = build_cost_matrix(logp, [2, 5, 2, 1])
    np.testing.assert_array_equal(cost[:, 0], cost[:, 2])
    assert cost[1, 3] == -logp[1, 1]


def test_cost_matrix_clamps_log_zero():
    logp = np.array([[0.0, -np.inf]])
    assert build_cost_matrix(logp, [1])[0, 0] == 30.0


SENTENCE = ["I", "ate", "pizza", "this", "afternoon"]
ROTATED = ["this", "afternoon", "I", "ate", "pizza"]


def rotated_scenario():
    vocab = SENTENCE
    probs = np.full((5, 5), 0.025)
    for i, w in enumerate(ROTATED):
        probs[i, vocab.index(w)] = 0.9
    return np.log(probs), np.arange(5)


def test_cost_matrix_optimum_is_rotated_ordering():
    logp, target = rotated_scenario()
    mapping, _ = brute_force_assignment(build_cost_matrix(logp, target))
    assert [SENTENCE[target[j]] for j in mapping] == ROTATED


# ---------------------------------------------------------------- OaXE


def test_oaxe_aligned_case_equals_xe():
    logp = np.log(np.full((4, 4), 0.05) + np.eye(4) * 0.80)
    target = np.arange(4)
    res = oaxe_loss(logp, target)
    assert res.loss == pytest.approx(xe_loss(logp, target).loss)
    assert res.ordering.tolist() == [0, 1, 2, 3]


def test_oaxe_reorders_rotated_reference():
    logp, target = rotated_scenario()
    res = oaxe_loss(logp, target)
    reordered = target[res.ordering]
    assert [SENTENCE[t] for t in reordered] == ROTATED
    assert res.loss == pytest.approx(xe_loss(logp, reordered).loss)
    assert res.loss == pytest.approx(-math.log(0.9))
    assert xe_loss(logp, target).loss == pytest.approx(-math.log(0.025))


def test_oaxe_matches_permutation_oracle():
    rng = np.random.default_rng(2)
    for _ in range(500):
        n, v = int(rng.integers(1, 7)), int(rng.integers(1, 9))
        logp, target = random_logp(rng, n, v), rng.integers(0, v, size=n)
        assert oaxe_loss(logp, target).loss == pytest.approx(oracle_oaxe(logp, target), abs=1e-9)


@settings(max_examples=300, deadline=None)
@given(problems())
def test_oaxe_never_exceeds_xe(problem):
    logp, target = problem
    assert oaxe_loss(logp, target).loss <= xe_loss(logp, target).loss + 1e-12


@settings(max_examples=200, deadline=None)
@given(problems(), st.randoms(use_true_random=False))
def test_oaxe_is_order_agnostic(problem, rnd):
    logp, target = problem
    shuffled = list(target)
    rnd.shuffle(shuffled)
    assert oaxe_loss(logp, shuffled).loss == pytest.approx(oaxe_loss(logp, target).loss, abs=1e-9)


@settings(max_examples=200, deadline=None)
@given(problems())
def test_gradient_sparsity(problem):
    logp, target = problem
    res = oaxe_truncated_loss(logp, target, 0.2)
    nz = np.flatnonzero(res.grad)
    assert len(nz) == res.kept.sum() <= len(target)
    if len(nz):
        np.testing.assert_allclose(res.grad.reshape(-1)[nz], -1.0 / res.kept.sum())
    reordered = np.asarray(target)[res.ordering]
    rows, cols = np.nonzero(res.grad)
    assert all(res.kept[r] and reordered[r] == c for r, c in zip(rows, cols))


# ---------------------------------------------------------------- truncation


def test_truncation_with_zero_margin_is_oaxe():
    rng = np.random.default_rng(4)
    for _ in range(50):
        logp, target = random_logp(rng, 5, 7), rng.integers(0, 7, size=5)
        a, b = oaxe_truncated_loss(logp, target, 0.0), oaxe_loss(logp, target)
        assert a.loss == b.loss
        assert a.kept.all()
        np.testing.assert_array_equal(a.grad, b.grad)


def test_truncation_drops_low_probability_token():
    # identity-aligned probabilities 0.5, 0.1, 0.3 on distinct tokens
    probs = np.array([[0.5, 0.05, 0.05, 0.4], [0.05, 0.1, 0.05, 0.8], [0.05, 0.05, 0.3, 0.6]])
    logp = np.log(probs)
    res = oaxe_truncated_loss(logp, [0, 1, 2], 0.15)
    assert res.ordering.tolist() == [0, 1, 2]
    assert res.kept.tolist() == [True, False, True]
    assert res.loss == pytest.approx(-(math.log(0.5) + math.log(0.3)) / 2)
    assert res.loss == pytest.approx(0.9486, abs=5e-5)
    assert np.all(res.grad[1] == 0)


def test_truncation_margin_comparison_is_strict():
    logp = np.log(np.array([[0.25, 0.75], [0.75, 0.25]]))
    res = oaxe_truncated_loss(logp, [0, 0], 0.25)
    # token 0 is matched to row 1 (0.75) and row 0 (0.25): 0.25 is not above the margin
    assert res.kept.tolist() == [False, True]


def test_all_dropped_gives_zero():
    logp = np.log(np.full((3, 10), 0.1))
    res = oaxe_truncated_loss(logp, [1, 2, 3], 0.5)
    assert res.loss == 0.0
    assert not res.kept.any()
    assert not res.grad.any()


def test_default_margin():
    assert losses.DEFAULT_TRUNC_PI == 0.15


@pytest.mark.parametrize("pi", [-0.1, 1.0, 1.5])
def test_truncation_rejects_bad_margin(pi):
    with pytest.raises(LossInputError):
        oaxe_truncated_loss(np.zeros((1, 1)), [0], pi)


@settings(max_examples=200, deadline=None)
@given(problems(), st.floats(0, 0.98), st.floats(0, 0.98))
def test_truncation_monotone_in_margin(problem, p1, p2):
    logp, target = problem
    lo, hi = sorted((p1, p2))
    a, b = oaxe_truncated_loss(logp, target, lo), oaxe_truncated_loss(logp, target, hi)
    assert a.ordering.tolist() == b.ordering.tolist()
    assert not np.any(b.kept & ~a.kept)


# ---------------------------------------------------------------- annealing


def test_temperature_is_zero_at_lambda_m():
    assert anneal_temperature(AnnealParams(16, 0.95, 100, 95)) == 0.0
    assert anneal_temperature(AnnealParams(2, 0.5, 10, 5)) == 0.0


def test_temperature_zero_after_lambda_m():
    for m in range(95, 101):
        assert anneal_temperature(AnnealParams(16, 0.95, 100, m)) == 0.0


def test_temperature_at_start():
    t = anneal_temperature(AnnealParams(16, 0.95, 100, 0))
    assert t == pytest.approx(1 - 16.0**-95)
    assert t == pytest.approx(1.0)


def test_temperature_monotone_and_positive_before_lambda_m():
    ts = [anneal_temperature(AnnealParams(16, 0.95, 100, m)) for m in range(101)]
    assert all(a >= b for a, b in zip(ts, ts[1:]))
    assert all(t > 0 for t in ts[:95])
    assert ts[94] == pytest.approx(1 - 1 / 16)


def test_lambda_one_keeps_xe_until_end():
    ts = [anneal_temperature(AnnealParams(16, 1.0, 10, m)) for m in range(11)]
    assert all(t > 0 for t in ts[:10]) and ts[10] == 0.0


@pytest.mark.parametrize("kwargs", [dict(c=1.0), dict(lam=1.5), dict(m=11, M=10), dict(m=-1)])
def test_anneal_params_validation(kwargs):
    with pytest.raises(LossInputError):
        AnnealParams(**kwargs)


# ---------------------------------------------------------------- joint


def test_joint_endpoints_and_linearity():
    rng = np.random.default_rng(8)
    for _ in range(50):
        logp, target = random_logp(rng, 5, 4), rng.integers(0, 4, size=5)
        xe, oa = xe_loss(logp, target), oaxe_loss(logp, target)
        one, zero = joint_loss(logp, target, 1.0), joint_loss(logp, target, 0.0)
        assert one.loss == xe.loss and np.array_equal(one.grad, xe.grad)
        assert zero.loss == oa.loss and np.array_equal(zero.grad, oa.grad)
        assert joint_loss(logp, target, 0.5).loss == pytest.approx((xe.loss + oa.loss) / 2, abs=1e-12)
        for t in np.linspace(0, 1, 7):
            assert joint_loss(logp, target, t).loss == pytest.approx(t * xe.loss + (1 - t) * oa.loss, abs=1e-12)


@pytest.mark.parametrize("T", [-0.01, 1.01])
def test_joint_rejects_bad_temperature(T):
    with pytest.raises(LossInputError):
        joint_loss(np.zeros((1, 1)), [0], T)


# ---------------------------------------------------------------- gradients


def tie_free_instance(rng, n, v, margin=1e-3):
    """Resample until the best permutation beats the runner-up by ``margin``."""
    while True:
        logp = random_logp(rng, n, v, sharpness=2.0)
        target = rng.choice(v, size=n, replace=False)
        cost = build_cost_matrix(logp, target)
        totals = sorted(sum(cost[i, p[i]] for i in range(n))
                        for p in itertools.permutations(range(n)))
        if totals[1] - totals[0] >= margin:
            return logp, target


def finite_difference(fn, logp, step=1e-5):
    grad = np.zeros_like(logp)
    for idx in np.ndindex(logp.shape):
        plus, minus = logp.copy(), logp.copy()
        plus[idx] += step
        minus[idx] -= step
        grad[idx] = (fn(plus) - fn(minus)) / (2 * step)
    return grad


def rel_err(a, b):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-12)


@pytest.mark.parametrize(
    "loss_fn",
    [xe_loss, oaxe_loss, lambda p, y: oaxe_truncated_loss(p, y, 0.1), lambda p, y: joint_loss(p, y, 0.3)],
    ids=["xe", "oaxe", "oaxe_trunc", "joint"],
)
def test_loss_gradients_match_finite_differences(loss_fn):
    rng = np.random.default_rng(9)
    for _ in range(20):
        n, v = int(rng.integers(2, 6)), int(rng.integers(5, 8))
        logp, target = tie_free_instance(rng, n, v)
        probs = np.exp(logp)
        if np.any(np.abs(probs - 0.1) < 1e-4):
            continue
        analytic = loss_fn(logp, target).grad
        numeric = finite_difference(lambda p: loss_fn(p, target).loss, logp)
        nonzero = (analytic != 0) | (np.abs(numeric) > 1e-8)
        assert np.all(rel_err(numeric, analytic)[nonzero] <= 1e-4)
        assert np.all(np.abs(numeric[~nonzero]) <= 1e-8)


# ---------------------------------------------------------------- batched forms


@pytest.mark.parametrize("kind", ["xe", "oaxe", "oaxe_trunc", "joint_anneal"])
def test_batch_loss_matches_single_examples(kind):
    rng = np.random.default_rng(12)
    lengths = np.array([4, 1, 6, 3])
    width, v = 6, 9
    logp = np.stack([random_logp(rng, width, v) for _ in lengths])
    targets = np.zeros((4, width), dtype=np.int64)
    for b, n in enumerate(lengths):
        targets[b, :n] = rng.integers(0, v, size=n)
    per_ex, grad = losses.batch_loss(kind, logp, targets, lengths, temperature=0.4, pi=0.15)
    single = {
        "xe": xe_loss,
        "oaxe": oaxe_loss,
        "oaxe_trunc": lambda p, y: oaxe_truncated_loss(p, y, 0.15),
        "joint_anneal": lambda p, y: joint_loss(p, y, 0.4),
    }[kind]
    for b, n in enumerate(lengths):
        res = single(logp[b, :n], targets[b, :n])
        assert per_ex[b] == pytest.approx(res.loss, abs=1e-12)
        np.testing.assert_allclose(grad[b, :n], res.grad, atol=1e-12)
        assert not grad[b, n:].any()


def test_batch_loss_unknown_kind():
    with pytest.raises(LossInputError):
        losses.batch_loss("axe", np.zeros((1, 2, 3)), np.zeros((1, 2), dtype=int), [2])
