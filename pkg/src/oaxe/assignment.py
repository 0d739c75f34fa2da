"""Minimum-cost perfect matching on square cost matrices.

The solver is the shortest-augmenting-path form of the Hungarian method with
row and column potentials. It runs in O(n^3) and is compiled with numba so it
can be called once per training example without dominating step time.
"""

from __future__ import annotations

import itertools

import numpy as np
from numba import njit

BRUTE_FORCE_LIMIT = 9


class AssignmentError(ValueError):
    """Raised for cost matrices the solver refuses to handle."""


@njit(cache=True)
def _hungarian(cost):
    n = cost.shape[0]
    inf = np.inf
    # 1-based bookkeeping; index 0 is the virtual source column.
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    row_of_col = np.zeros(n + 1, dtype=np.int64)
    way = np.zeros(n + 1, dtype=np.int64)
    minv = np.empty(n + 1)
    used = np.empty(n + 1, dtype=np.bool_)
    for i in range(1, n + 1):
        row_of_col[0] = i
        j0 = 0
        minv[:] = inf
        used[:] = False
        while True:
            used[j0] = True
            i0 = row_of_col[j0]
            delta = inf
            j1 = -1
            for j in range(1, n + 1):
                if not used[j]:
                    cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[row_of_col[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if row_of_col[j0] == 0:
                break
        while j0 != 0:
            j1 = way[j0]
            row_of_col[j0] = row_of_col[j1]
            j0 = j1
    mapping = np.empty(n, dtype=np.int64)
    for j in range(1, n + 1):
        mapping[row_of_col[j] - 1] = j - 1
    return mapping


@njit(cache=True)
def _hungarian_batch(costs, lengths):
    batch, width = costs.shape[0], costs.shape[1]
    out = np.zeros((batch, width), dtype=np.int64)
    for b in range(batch):
        n = lengths[b]
        out[b, :n] = _hungarian(costs[b, :n, :n])
        for k in range(n, width):
            out[b, k] = k
    return out


def _path_cost(cost: np.ndarray, mapping: np.ndarray) -> float:
    # Sequential accumulation in row order; both solvers report through here
    # so equal permutations give bit-identical totals.
    total = 0.0
    for i, j in enumerate(mapping):
        total += float(cost[i, j])
    return total


def _validate(cost) -> np.ndarray:
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise AssignmentError(f"cost matrix must be square, got shape {cost.shape}")
    if cost.shape[0] == 0:
        raise AssignmentError("cost matrix is empty")
    if not np.all(np.isfinite(cost)):
        raise AssignmentError("cost matrix contains non-finite entries")
    return np.ascontiguousarray(cost)


def solve_assignment(cost) -> tuple[np.ndarray, float]:
    """Find the permutation minimizing ``sum(cost[i, mapping[i]])``.

    Parameters:
        cost: Square ``n x n`` array of finite costs, ``n >= 1``.

    Returns:
        ``(mapping, total_cost)`` where ``mapping[i]`` is the column assigned
        to row ``i``. Among co-optimal permutations any one may be returned.

    Raises:
        AssignmentError: If the matrix is empty, non-square or non-finite.
    """
    cost = _validate(cost)
    mapping = _hungarian(cost)
    return mapping, _path_cost(cost, mapping)


def solve_assignment_batch(costs: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    """Solve a padded stack of assignment problems in one compiled call.

    ``costs[b, :n, :n]`` with ``n = lengths[b]`` is the live block of problem
    ``b``; padding rows map to themselves. Only finiteness is checked, since a
    NaN would keep the augmenting-path search from terminating.
    """
    costs = np.ascontiguousarray(costs, dtype=np.float64)
    if not np.isfinite(costs).all():
        raise AssignmentError("cost matrices must be finite")
    return _hungarian_batch(costs, np.asarray(lengths, dtype=np.int64))


def brute_force_assignment(cost) -> tuple[np.ndarray, float]:
    """Exhaustive search over all ``n!`` permutations (test oracle, ``n <= 9``).

    Ties resolve to the lexicographically first permutation.
    """
    cost = _validate(cost)
    n = cost.shape[0]
    if n > BRUTE_FORCE_LIMIT:
        raise AssignmentError(
            f"brute force limited to n <= {BRUTE_FORCE_LIMIT}, got n = {n}"
        )
    perms = np.array(list(itertools.permutations(range(n))), dtype=np.int64)
    totals = np.zeros(len(perms))
    for i in range(n):
        totals += cost[i, perms[:, i]]
    best = perms[int(np.argmin(totals))]
    return best, _path_cost(cost, best)


def is_permutation(mapping, n: int) -> bool:
    mapping = np.asarray(mapping)
    return mapping.shape == (n,) and bool(np.array_equal(np.sort(mapping), np.arange(n)))
