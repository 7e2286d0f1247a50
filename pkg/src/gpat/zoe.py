"""Zeroth-order gradient estimation through the query oracle.

Two estimators over the observable loss: central finite differences on a
chosen coordinate set, and a Gaussian search-distribution estimator with
antithetic pairing. Plus the magnitude ranking that picks which coordinates
to probe next.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from gpat.oracle import BudgetExhausted

__all__ = ["GradEstimate", "fd_estimate", "nes_estimate", "top_q_select"]


@dataclass(frozen=True)
class GradEstimate:
    """Estimated gradient map with its probed support and query cost."""

    grad: np.ndarray
    support: tuple
    queries_spent: int


def _check_coords(coords, size: int) -> np.ndarray:
    idx = np.asarray(list(coords), dtype=np.int64)
    if idx.ndim != 1 or len(idx) == 0:
        raise ValueError("coordinate set must be a nonempty 1-D index list")
    if len(np.unique(idx)) != len(idx):
        raise ValueError("coordinate set contains duplicates")
    if idx.min() < 0 or idx.max() >= size:
        raise ValueError(f"coordinate index out of range for size {size}")
    if not np.all(idx[:-1] < idx[1:]):
        raise ValueError("coordinate set must be sorted ascending")
    return idx


def fd_estimate(oracle, x: np.ndarray, class_idx: int, mode: str,
                coords, h: float = 1e-4) -> GradEstimate:
    """Central differences per coordinate: (l(x+h*e_i) - l(x-h*e_i)) / 2h.

    Costs exactly 2*|coords| queries. Exact on locally affine and quadratic
    losses for any h. If the budget runs out mid-sweep the raised signal
    carries the partial estimate restricted to completed coordinates.
    """
    if h <= 0:
        raise ValueError(f"step size h must be > 0, got {h}")
    x = np.asarray(x, dtype=np.float64)
    idx = _check_coords(coords, x.size)
    grad = np.zeros_like(x)
    flat = grad.reshape(-1)
    before = oracle.ledger.total
    done = []
    for i in idx:
        probe = x.copy().reshape(-1)
        probe[i] += h
        try:
            up = oracle.loss(probe.reshape(x.shape), class_idx, mode, phase="estimate")
            probe[i] -= 2 * h
            down = oracle.loss(probe.reshape(x.shape), class_idx, mode, phase="estimate")
        except BudgetExhausted as exc:
            exc.partial = GradEstimate(grad.copy(), tuple(done),
                                       oracle.ledger.total - before)
            raise
        flat[i] = (up - down) / (2 * h)
        done.append(int(i))
    spent = oracle.ledger.total - before
    assert spent == 2 * len(idx), f"ledger delta {spent} != 2*{len(idx)}"
    return GradEstimate(grad, tuple(int(i) for i in idx), spent)


def nes_estimate(oracle, x: np.ndarray, class_idx: int, mode: str,
                 n: int, sigma: float, seed: int) -> GradEstimate:
    """Search-distribution estimate: (1/(sigma*n)) * sum_i l(x+sigma*d_i) d_i.

    Draws n/2 unit-Gaussian maps and evaluates both signs of each, so a
    constant loss cancels to the exact zero map. Costs exactly n queries and
    reports full support.
    """
    if n < 2 or n % 2:
        raise ValueError(f"sample count n must be even and >= 2, got {n}")
    if sigma < 1e-6:
        raise ValueError(f"sigma must be >= 1e-6, got {sigma}")
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(seed)
    accum = np.zeros_like(x)
    before = oracle.ledger.total
    pairs_done = 0
    try:
        for _ in range(n // 2):
            delta = rng.standard_normal(x.shape)
            up = oracle.loss(x + sigma * delta, class_idx, mode, phase="estimate")
            down = oracle.loss(x - sigma * delta, class_idx, mode, phase="estimate")
            accum += (up - down) * delta
            pairs_done += 1
    except BudgetExhausted as exc:
        spent = oracle.ledger.total - before
        partial = accum / (sigma * 2 * pairs_done) if pairs_done else np.zeros_like(x)
        exc.partial = GradEstimate(partial, tuple(range(x.size)), spent)
        raise
    spent = oracle.ledger.total - before
    assert spent == n, f"ledger delta {spent} != {n}"
    return GradEstimate(accum / (sigma * n), tuple(range(x.size)), spent)


def top_q_select(g_prev: np.ndarray, q: int) -> tuple:
    """Flat indices of the q largest |g_prev| entries, ascending.

    Equal magnitudes resolve to the lower index regardless of storage
    order, so rankings are reproducible.
    """
    flat = np.abs(np.asarray(g_prev, dtype=np.float64).reshape(-1))
    if not 1 <= q <= flat.size:
        raise ValueError(f"q must be in [1, {flat.size}], got {q}")
    ranked = np.argsort(-flat, kind="stable")[:q]
    return tuple(int(i) for i in np.sort(ranked))
