"""Black-box oracle boundary: budgeted top-k score queries with exact counting.

Attack code talks to target models only through this module. Every model
evaluation increments a ledger by exactly one, the budget is enforced before
evaluation, and recorded query traces can be replayed bit-exactly without
the model present.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from gpat import tensor as T
from gpat.loss import PROB_FLOOR

__all__ = [
    "PHASES",
    "BudgetExhausted",
    "QueryLedger",
    "TopKResponse",
    "BlackBoxOracle",
    "ReplayOracle",
    "loss_from_response",
    "success",
]

PHASES = ("estimate", "finetune", "check")


class BudgetExhausted(RuntimeError):
    """Raised when a query would exceed the oracle's budget.

    Carries the ledger snapshot at the moment of refusal; estimation code
    attaches whatever partial result it had via ``partial``.
    """

    def __init__(self, budget: int, snapshot: dict, partial=None):
        super().__init__(f"query budget of {budget} exhausted "
                         f"(total spent: {snapshot['total']})")
        self.budget = budget
        self.snapshot = snapshot
        self.partial = partial


@dataclass
class QueryLedger:
    """Counts every oracle evaluation, split by phase, with an event log."""

    total: int = 0
    by_phase: dict = field(default_factory=lambda: {p: 0 for p in PHASES})
    events: list = field(default_factory=list)   # (iter, phase, cum_total)
    current_iter: int = 0

    def record(self, phase: str) -> None:
        if phase not in PHASES:
            raise ValueError(f"unknown query phase {phase!r}")
        self.total += 1
        self.by_phase[phase] += 1
        self.events.append((self.current_iter, phase, self.total))

    def snapshot(self) -> dict:
        return {"total": self.total, "by_phase": dict(self.by_phase)}

    def export_jsonl(self, path=None) -> str:
        lines = [json.dumps({"iter": it, "phase": ph, "cum_total": ct})
                 for it, ph, ct in self.events]
        text = "\n".join(lines) + ("\n" if lines else "")
        if path is not None:
            Path(path).write_text(text)
        return text


@dataclass(frozen=True)
class TopKResponse:
    """Descending (class index, probability) pairs; ties broken by class index."""

    pairs: tuple

    def __post_init__(self):
        object.__setattr__(self, "pairs", tuple((int(c), float(p)) for c, p in self.pairs))
        if not self.pairs:
            raise ValueError("empty top-k response")
        probs = [p for _, p in self.pairs]
        if any(p2 > p1 for p1, p2 in zip(probs, probs[1:])):
            raise ValueError("top-k probabilities must be descending")

    @property
    def top_class(self) -> int:
        return self.pairs[0][0]

    def prob_of(self, class_idx: int) -> float | None:
        for c, p in self.pairs:
            if c == class_idx:
                return p
        return None

    @classmethod
    def from_probs(cls, probs: np.ndarray, k: int) -> "TopKResponse":
        order = sorted(range(len(probs)), key=lambda i: (-probs[i], i))
        return cls(tuple((i, float(probs[i])) for i in order[:k]))


def loss_from_response(resp: TopKResponse, class_idx: int, mode: str) -> float:
    """Margin loss reconstructed from observable scores.

    Classes outside the returned list get the pessimistic floor
    min(returned probabilities, 1e-12). When k equals the class count this
    reduces exactly to the full-distribution margin loss.
    """
    if mode not in ("untargeted", "targeted"):
        raise ValueError(f"unknown attack mode {mode!r}")
    floor = min(min(p for _, p in resp.pairs), PROB_FLOOR)
    p_c = resp.prob_of(class_idx)
    if p_c is None:
        p_c = floor
    others = [p for c, p in resp.pairs if c != class_idx]
    p_other = max(others) if others else floor
    p_c = max(p_c, PROB_FLOOR)
    p_other = max(p_other, PROB_FLOOR)
    if mode == "untargeted":
        return max(math.log(p_c) - math.log(p_other), 0.0)
    return max(math.log(p_other) - math.log(p_c), 0.0)


def success(resp: TopKResponse, class_idx: int, mode: str) -> bool:
    """Strict argmax test: displaced true class, or reached target class."""
    if mode == "untargeted":
        return resp.top_class != class_idx
    if mode == "targeted":
        return resp.top_class == class_idx
    raise ValueError(f"unknown attack mode {mode!r}")


class BlackBoxOracle:
    """Budgeted query interface over a classifier.

    Only top-k scores cross this boundary; the wrapped model is private and
    never reachable from responses. With ``record=True`` every (input copy,
    response) pair lands in ``trace`` for later replay.
    """

    def __init__(self, model, budget: int, k: int | None = None, record: bool = False):
        if budget < 0:
            raise ValueError(f"budget must be >= 0, got {budget}")
        classes = model.classes
        if k is None:
            k = classes
        if not 1 <= k <= classes:
            raise ValueError(f"k must be in [1, {classes}], got {k}")
        self._model = model
        self.k = k
        self.budget = budget
        self.ledger = QueryLedger()
        self.trace: list | None = [] if record else None

    @property
    def remaining(self) -> int:
        return self.budget - self.ledger.total

    def query_topk(self, x: np.ndarray, phase: str = "check") -> TopKResponse:
        if self.ledger.total >= self.budget:
            raise BudgetExhausted(self.budget, self.ledger.snapshot())
        with T.no_grad():
            probs = self._model.predict_probs(np.asarray(x, dtype=np.float64))
        resp = TopKResponse.from_probs(probs, self.k)
        self.ledger.record(phase)
        if self.trace is not None:
            self.trace.append((np.array(x, dtype=np.float64, copy=True), resp))
        return resp

    def loss(self, x: np.ndarray, class_idx: int, mode: str,
             phase: str = "estimate") -> float:
        return loss_from_response(self.query_topk(x, phase=phase), class_idx, mode)


class ReplayOracle:
    """Serves a recorded query trace in order, verifying inputs bit-exactly.

    Lets attack decisions be reproduced, and re-scored under smaller
    budgets, without the original model. Maintains its own ledger with the
    same budget semantics as the live oracle.
    """

    def __init__(self, trace: list, budget: int, k: int):
        self.k = k
        self.budget = budget
        self.ledger = QueryLedger()
        self._trace = trace
        self._pos = 0

    @property
    def remaining(self) -> int:
        return self.budget - self.ledger.total

    def query_topk(self, x: np.ndarray, phase: str = "check") -> TopKResponse:
        if self.ledger.total >= self.budget:
            raise BudgetExhausted(self.budget, self.ledger.snapshot())
        if self._pos >= len(self._trace):
            raise IndexError("replay trace exhausted")
        x_rec, resp = self._trace[self._pos]
        if not np.array_equal(np.asarray(x, dtype=np.float64), x_rec):
            raise ValueError(f"replay diverged at query {self._pos}: input differs")
        self._pos += 1
        self.ledger.record(phase)
        return resp

    def loss(self, x: np.ndarray, class_idx: int, mode: str,
             phase: str = "estimate") -> float:
        return loss_from_response(self.query_topk(x, phase=phase), class_idx, mode)
