"""Cross entropy, order-agnostic cross entropy and their training variants.

Every loss is a per-token mean over the tokens it keeps and returns its
gradient with respect to the log-probability matrix. Re-normalization through
the softmax is the model's job, so inputs here need not be normalized rows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .assignment import solve_assignment, solve_assignment_batch

LOG_PROB_FLOOR = -30.0
DEFAULT_TRUNC_PI = 0.15


class LossInputError(ValueError):
    pass


@dataclass
class LossResult:
    loss: float
    grad: np.ndarray
    ordering: np.ndarray
    kept: np.ndarray


@dataclass(frozen=True)
class AnnealParams:
    c: float = 16.0
    lam: float = 0.95
    M: int = 100
    m: int = 0

    def __post_init__(self):
        if not self.c > 1:
            raise LossInputError(f"anneal base c must exceed 1, got {self.c}")
        if not 0 <= self.lam <= 1:
            raise LossInputError(f"anneal lambda must lie in [0, 1], got {self.lam}")
        if not 0 <= self.m <= self.M:
            raise LossInputError(f"epoch m={self.m} outside [0, M={self.M}]")


def _check(logp, target) -> tuple[np.ndarray, np.ndarray]:
    logp = np.asarray(logp)
    target = np.asarray(target, dtype=np.int64)
    if logp.ndim != 2 or target.ndim != 1:
        raise LossInputError("expected an (N, V) log-prob matrix and a length-N target")
    if len(target) == 0:
        raise LossInputError("target sequence is empty")
    if logp.shape[0] != len(target):
        raise LossInputError(
            f"log-prob rows ({logp.shape[0]}) != target length ({len(target)})"
        )
    if target.min() < 0 or target.max() >= logp.shape[1]:
        raise LossInputError(f"target token id outside vocabulary [0, {logp.shape[1]})")
    return logp, target


def _masked_xe(logp, target, ordering, kept) -> LossResult:
    n = len(target)
    rows = np.arange(n)
    grad = np.zeros(logp.shape, dtype=np.float64)
    count = int(kept.sum())
    if count == 0:
        return LossResult(0.0, grad, ordering, kept)
    picked = logp[rows, target].astype(np.float64)
    loss = -float(np.sum(picked[kept])) / count
    grad[rows[kept], target[kept]] = -1.0 / count
    return LossResult(loss, grad, ordering, kept)


def xe_loss(logp, target) -> LossResult:
    """Position-wise cross entropy, ``-(1/N) sum_n logp[n, y_n]``."""
    logp, target = _check(logp, target)
    n = len(target)
    return _masked_xe(logp, target, np.arange(n), np.ones(n, dtype=bool))


def build_cost_matrix(logp, target) -> np.ndarray:
    """``cost[i, j] = -logp[i, target[j]]``, with log-probs floored at -30."""
    logp, target = _check(logp, target)
    gathered = np.asarray(logp, dtype=np.float64)[:, target]
    return -np.maximum(gathered, LOG_PROB_FLOOR)


def _best_ordering(logp, target) -> tuple[np.ndarray, np.ndarray]:
    mapping, _ = solve_assignment(build_cost_matrix(logp, target))
    return mapping, target[mapping]


def oaxe_loss(logp, target) -> LossResult:
    """Cross entropy against the best reordering of the target.

    The reordering is found by minimum-cost matching between prediction
    positions and target tokens, then held fixed for the gradient.
    """
    logp, target = _check(logp, target)
    mapping, reordered = _best_ordering(logp, target)
    n = len(target)
    return _masked_xe(logp, reordered, mapping, np.ones(n, dtype=bool))


def oaxe_truncated_loss(logp, target, pi: float = DEFAULT_TRUNC_PI) -> LossResult:
    """OaXE over aligned tokens whose probability is strictly above ``pi``.

    If every token is dropped the example contributes zero loss and gradient.
    """
    if not 0 <= pi < 1:
        raise LossInputError(f"truncation margin must lie in [0, 1), got {pi}")
    logp, target = _check(logp, target)
    mapping, reordered = _best_ordering(logp, target)
    probs = np.exp(logp[np.arange(len(target)), reordered].astype(np.float64))
    return _masked_xe(logp, reordered, mapping, probs > pi)


def anneal_temperature(p: AnnealParams) -> float:
    """``max(0, 1 - c ** (m - lam * M))``; exactly 0 from epoch ``lam * M`` on."""
    exponent = p.m - p.lam * p.M
    # lam * M is rarely exact in binary floating point.
    if exponent >= -1e-9 * max(1.0, p.M):
        return 0.0
    return max(0.0, 1.0 - math.pow(p.c, exponent))


def joint_loss(logp, target, T: float) -> LossResult:
    """``T * XE + (1 - T) * OaXE``; ordering and kept come from the OaXE side."""
    if not 0 <= T <= 1:
        raise LossInputError(f"temperature must lie in [0, 1], got {T}")
    xe = xe_loss(logp, target)
    oa = oaxe_loss(logp, target)
    return LossResult(
        T * xe.loss + (1 - T) * oa.loss,
        T * xe.grad + (1 - T) * oa.grad,
        oa.ordering,
        oa.kept,
    )


# Batched forms used by the training loop. Shapes: logp (B, T, V),
# targets (B, T) padded, lengths (B,). Gradients are per-example means, so the
# rows of each example match what the single-example functions return.


def _batch_rows(lengths, width):
    return np.arange(width)[None, :] < np.asarray(lengths)[:, None]


def batch_orderings(logp: np.ndarray, targets: np.ndarray, lengths) -> np.ndarray:
    """Best reordering per example; mirrors the gather-then-match recipe."""
    batch, width = targets.shape
    # costs[b, i, j] = -logp[b, i, targets[b, j]]
    gathered = np.take_along_axis(
        logp, np.broadcast_to(targets[:, None, :], (batch, width, width)), axis=2
    )
    costs = -np.maximum(gathered.astype(np.float64), LOG_PROB_FLOOR)
    mapping = solve_assignment_batch(costs, lengths)
    return np.take_along_axis(targets, mapping, axis=1)


def batch_loss(
    kind: str,
    logp: np.ndarray,
    targets: np.ndarray,
    lengths,
    *,
    temperature: float = 1.0,
    pi: float = DEFAULT_TRUNC_PI,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-example losses ``(B,)`` and gradient ``(B, T, V)`` for a padded batch.

    ``kind`` is one of ``xe``, ``oaxe``, ``oaxe_trunc`` or ``joint_anneal``.
    """
    lengths = np.asarray(lengths)
    batch, width = targets.shape
    live = _batch_rows(lengths, width)
    b_idx = np.arange(batch)[:, None]
    t_idx = np.arange(width)[None, :]

    def masked(aligned, keep):
        picked = logp[b_idx, t_idx, aligned].astype(np.float64)
        counts = keep.sum(axis=1)
        safe = np.maximum(counts, 1)
        losses = -np.where(keep, picked, 0.0).sum(axis=1) / safe
        grad = np.zeros(logp.shape, dtype=logp.dtype)
        weight = np.where(keep, -1.0 / safe[:, None], 0.0)
        grad[b_idx, t_idx, aligned] = weight
        return losses, grad

    if kind == "xe":
        return masked(targets, live)
    if kind == "joint_anneal" and temperature >= 1.0:
        return masked(targets, live)
    aligned = batch_orderings(logp, targets, lengths)
    if kind == "oaxe":
        return masked(aligned, live)
    if kind == "oaxe_trunc":
        probs = np.exp(logp[b_idx, t_idx, aligned].astype(np.float64))
        return masked(aligned, live & (probs > pi))
    if kind == "joint_anneal":
        xe_l, xe_g = masked(targets, live)
        oa_l, oa_g = masked(aligned, live)
        t = temperature
        return t * xe_l + (1 - t) * oa_l, t * xe_g + (1 - t) * oa_g
    raise LossInputError(f"unknown loss kind {kind!r}")
