"""Query-efficient attack loops over the black-box oracle.

The main loop alternates cheap attacker-predicted gradient steps with
periodic finite-difference estimation on a top-q coordinate set, fine-tuning
a per-attack copy of the attacker on each estimate. Two baselines bracket
it: estimation every iteration (no attacker) and a full-support
search-distribution loop.

Steps descend the active mode's margin loss: x <- clip(x - beta * g) on the
selected coordinates.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from gpat.loss import masked_mse
from gpat.nn import AttackerModel
from gpat.oracle import BudgetExhausted, loss_from_response, success
from gpat.tensor import ParamSet, Tensor
from gpat.zoe import GradEstimate, fd_estimate, nes_estimate, top_q_select

__all__ = [
    "AttackConfig",
    "AttackResult",
    "meta_attack",
    "finetune_attacker",
    "fd_baseline_attack",
    "nes_baseline_attack",
]


@dataclass(frozen=True)
class AttackConfig:
    """Knobs for one attack run; defaults follow the reference setting."""

    m: int = 5                    # estimation/fine-tune period
    q: int = 128                  # coordinates per estimation round
    beta: float = 4e-3            # step size
    finetune_steps: int = 5
    finetune_lr: float = 1e-2
    budget: int = 3000
    max_iters: int = 10000
    mode: str = "untargeted"
    # targeted mode: a class index, or "next" meaning (label + 1) mod classes,
    # resolved to an index by the caller before the attack runs
    target_class: int | str | None = None
    h: float = 1e-4
    clip: tuple[float, float] = (0.0, 1.0)
    seed: int = 0
    nes_n: int = 50
    nes_sigma: float = 1e-3

    def __post_init__(self):
        if self.m < 1:
            raise ValueError(f"m must be >= 1, got {self.m}")
        if self.q < 1:
            raise ValueError(f"q must be >= 1, got {self.q}")
        # beta = 0 is allowed as an explicit null step for debugging
        if self.beta < 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")
        if self.finetune_steps < 0:
            raise ValueError(f"finetune_steps must be >= 0, got {self.finetune_steps}")
        if self.finetune_lr < 0:
            raise ValueError(f"finetune_lr must be >= 0, got {self.finetune_lr}")
        if self.budget < 1:
            raise ValueError(f"budget must be >= 1, got {self.budget}")
        if self.max_iters < 0:
            raise ValueError(f"max_iters must be >= 0, got {self.max_iters}")
        if self.mode not in ("untargeted", "targeted"):
            raise ValueError(f"unknown attack mode {self.mode!r}")
        if self.mode == "targeted":
            if self.target_class is None:
                raise ValueError("targeted mode requires target_class")
            if isinstance(self.target_class, str) and self.target_class != "next":
                raise ValueError(f"target_class must be an index or 'next', "
                                 f"got {self.target_class!r}")
        if self.h <= 0:
            raise ValueError(f"h must be > 0, got {self.h}")
        lo, hi = self.clip
        if not lo < hi:
            raise ValueError(f"clip range must satisfy lo < hi, got {self.clip}")
        if self.nes_n < 2 or self.nes_n % 2:
            raise ValueError(f"nes_n must be even and >= 2, got {self.nes_n}")
        if self.nes_sigma < 1e-6:
            raise ValueError(f"nes_sigma must be >= 1e-6, got {self.nes_sigma}")


@dataclass
class AttackResult:
    success: bool
    queries: int
    l2: float
    iterations: int
    x_adv: np.ndarray
    trace: list = field(default_factory=list)

    def summary(self) -> dict:
        return {"success": self.success, "queries": self.queries,
                "l2": self.l2, "iterations": self.iterations}

    def to_json(self) -> str:
        return json.dumps(self.summary(), sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    def save_trace(self, path) -> None:
        lines = [json.dumps(rec, sort_keys=True) for rec in self.trace]
        Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))

    def save_image(self, path) -> None:
        ParamSet([("x_adv", Tensor(self.x_adv))]).save(path)


def finetune_attacker(attacker_copy: AttackerModel, x_t: np.ndarray,
                      g_t: GradEstimate, coords, steps: int,
                      lr: float) -> AttackerModel:
    """Descend the masked reconstruction error of one (image, estimate) pair.

    Mutates ``attacker_copy`` in place. Running statistics stay frozen; only
    weights, biases and the batchnorm affine terms move.
    """
    if tuple(g_t.support) != tuple(coords):
        raise ValueError("estimate support and fine-tune coordinate set differ")
    target = Tensor(g_t.grad)
    for _ in range(steps):
        pred = attacker_copy.forward(Tensor(np.asarray(x_t, dtype=np.float64)),
                                     train=False)
        loss = masked_mse(pred, target, coords)
        attacker_copy.params.zero_grad()
        loss.backward()
        if lr > 0:
            for p in attacker_copy.params.tensors():
                p.data -= lr * p.grad
    return attacker_copy


def _mask_to(g: np.ndarray, coords) -> np.ndarray:
    out = np.zeros_like(g)
    flat_in = g.reshape(-1)
    flat_out = out.reshape(-1)
    idx = np.asarray(coords, dtype=np.int64)
    flat_out[idx] = flat_in[idx]
    return out


def _result(success_flag: bool, oracle, x_adv: np.ndarray, x0: np.ndarray,
            iterations: int, trace: list) -> AttackResult:
    l2 = float(np.linalg.norm((x_adv - x0).reshape(-1)))
    return AttackResult(success=success_flag, queries=oracle.ledger.total,
                        l2=l2, iterations=iterations, x_adv=x_adv, trace=trace)


def _init_check(oracle, x0, loss_class, config, trace):
    """Iteration-0 query: pre-misclassified inputs succeed at cost 1."""
    oracle.ledger.current_iter = 0
    resp = oracle.query_topk(x0, phase="check")
    trace.append({"iter": 0, "phase": "init",
                  "loss": loss_from_response(resp, loss_class, config.mode),
                  "cum_queries": oracle.ledger.total})
    return success(resp, loss_class, config.mode)


def _check_inputs(x0, config):
    x0 = np.asarray(x0, dtype=np.float64)
    lo, hi = config.clip
    if x0.min() < lo or x0.max() > hi:
        raise ValueError("x0 lies outside the clip range")
    if config.q > x0.size:
        raise ValueError(f"q={config.q} exceeds pixel count {x0.size}")
    if config.mode == "targeted" and not isinstance(config.target_class, int):
        raise ValueError("target_class must be resolved to a class index "
                         "before attacking")
    return x0


def meta_attack(x0: np.ndarray, true_class: int, attacker: AttackerModel,
                oracle, config: AttackConfig, prediction_hook=None) -> AttackResult:
    """Attack one image, spending oracle queries only when the period demands.

    Every m-th iteration estimates the gradient on a top-q coordinate set
    (ranked from the previous gradient map; the first round ranks from the
    still-untuned attacker's prediction at the current point) and fine-tunes
    a per-attack attacker copy on it. Other iterations step along the
    attacker's own masked prediction at no estimation cost. One check query
    per iteration decides success and logs the observable loss.

    ``prediction_hook(x_t, g_full)`` fires on prediction iterations before
    masking; diagnostics use it to compare maps against white-box gradients.
    """
    x0 = _check_inputs(x0, config)
    loss_class = true_class if config.mode == "untargeted" else config.target_class
    trace: list = []
    try:
        if _init_check(oracle, x0, loss_class, config, trace):
            return _result(True, oracle, x0.copy(), x0, 0, trace)
    except BudgetExhausted:
        return _result(False, oracle, x0.copy(), x0, 0, trace)
    tuned = attacker.copy()
    x = x0.copy()
    g_prev: np.ndarray | None = None
    estimations = 0
    lo, hi = config.clip
    for t in range(config.max_iters):
        oracle.ledger.current_iter = t + 1
        estimation_round = (t + 1) % config.m == 0
        try:
            if estimation_round:
                g_rank = g_prev if estimations > 0 else tuned.predict(x)
                coords = top_q_select(g_rank, config.q)
                est = fd_estimate(oracle, x, loss_class, config.mode, coords,
                                  h=config.h)
                finetune_attacker(tuned, x, est, coords,
                                  config.finetune_steps, config.finetune_lr)
                g_t = est.grad
                estimations += 1
            else:
                g_full = tuned.predict(x)
                if prediction_hook is not None:
                    prediction_hook(x.copy(), g_full.copy())
                coords = top_q_select(g_full, config.q)
                g_t = _mask_to(g_full, coords)
            x = np.clip(x - config.beta * g_t, lo, hi)
            resp = oracle.query_topk(x, phase="check")
        except BudgetExhausted:
            return _result(False, oracle, x, x0, t, trace)
        g_prev = g_t
        trace.append({"iter": t + 1,
                      "phase": "estimate" if estimation_round else "predict",
                      "loss": loss_from_response(resp, loss_class, config.mode),
                      "cum_queries": oracle.ledger.total})
        if success(resp, loss_class, config.mode):
            return _result(True, oracle, x, x0, t + 1, trace)
    return _result(False, oracle, x, x0, config.max_iters, trace)


def fd_baseline_attack(x0: np.ndarray, true_class: int, oracle,
                       config: AttackConfig) -> AttackResult:
    """Estimation every iteration, no attacker: 2q + 1 queries per step.

    The first coordinate ranking uses the image's own pixel magnitudes;
    afterwards each round ranks from the previous estimate.
    """
    x0 = _check_inputs(x0, config)
    loss_class = true_class if config.mode == "untargeted" else config.target_class
    trace: list = []
    try:
        if _init_check(oracle, x0, loss_class, config, trace):
            return _result(True, oracle, x0.copy(), x0, 0, trace)
    except BudgetExhausted:
        return _result(False, oracle, x0.copy(), x0, 0, trace)
    x = x0.copy()
    g_prev = x0
    lo, hi = config.clip
    for t in range(config.max_iters):
        oracle.ledger.current_iter = t + 1
        try:
            coords = top_q_select(g_prev, config.q)
            est = fd_estimate(oracle, x, loss_class, config.mode, coords, h=config.h)
            x = np.clip(x - config.beta * est.grad, lo, hi)
            resp = oracle.query_topk(x, phase="check")
        except BudgetExhausted:
            return _result(False, oracle, x, x0, t, trace)
        g_prev = est.grad
        trace.append({"iter": t + 1, "phase": "estimate",
                      "loss": loss_from_response(resp, loss_class, config.mode),
                      "cum_queries": oracle.ledger.total})
        if success(resp, loss_class, config.mode):
            return _result(True, oracle, x, x0, t + 1, trace)
    return _result(False, oracle, x, x0, config.max_iters, trace)


def nes_baseline_attack(x0: np.ndarray, true_class: int, oracle,
                        config: AttackConfig) -> AttackResult:
    """Search-distribution estimate every iteration: n + 1 queries per step.

    Updates the full support (no coordinate selection); the sampling stream
    is seeded once so runs are reproducible.
    """
    x0 = _check_inputs(x0, config)
    loss_class = true_class if config.mode == "untargeted" else config.target_class
    trace: list = []
    try:
        if _init_check(oracle, x0, loss_class, config, trace):
            return _result(True, oracle, x0.copy(), x0, 0, trace)
    except BudgetExhausted:
        return _result(False, oracle, x0.copy(), x0, 0, trace)
    x = x0.copy()
    lo, hi = config.clip
    seeds = np.random.SeedSequence(config.seed).spawn(config.max_iters)
    for t in range(config.max_iters):
        oracle.ledger.current_iter = t + 1
        try:
            est = nes_estimate(oracle, x, loss_class, config.mode,
                               n=config.nes_n, sigma=config.nes_sigma,
                               seed=seeds[t])
            x = np.clip(x - config.beta * est.grad, lo, hi)
            resp = oracle.query_topk(x, phase="check")
        except BudgetExhausted:
            return _result(False, oracle, x, x0, t, trace)
        trace.append({"iter": t + 1, "phase": "estimate",
                      "loss": loss_from_response(resp, loss_class, config.mode),
                      "cum_queries": oracle.ledger.total})
        if success(resp, loss_class, config.mode):
            return _result(True, oracle, x, x0, t + 1, trace)
    return _result(False, oracle, x, x0, config.max_iters, trace)
