"""Scalar objectives used for gradient generation, fine-tuning, and attacks.

All losses return scalar :class:`~gpat.tensor.Tensor` values so callers can
back-propagate through them when the inputs carry a graph; called on plain
arrays they simply evaluate.
"""

from __future__ import annotations

import numpy as np

from gpat.tensor import Tensor

__all__ = ["PROB_FLOOR", "margin_loss", "targeted_margin_loss", "attack_objective", "masked_mse"]

PROB_FLOOR = 1e-12  # probabilities are clamped to [PROB_FLOOR, 1] before logs


def _as_prob_vector(probs) -> Tensor:
    t = probs if isinstance(probs, Tensor) else Tensor(probs)
    if t.ndim != 1 or t.size < 2:
        raise ValueError(f"expected a probability vector of >= 2 classes, got shape {t.shape}")
    return t


def _check_class(idx: int, classes: int, what: str) -> int:
    idx = int(idx)
    if not 0 <= idx < classes:
        raise ValueError(f"{what} {idx} out of range for {classes} classes")
    return idx


def margin_loss(probs, true_class: int) -> Tensor:
    """Clamped log-margin of the true class over its strongest competitor.

    Returns ``max(log p_t - max_{j != t} log p_j, 0)``: strictly positive while
    the true class holds the top score, exactly zero once it is displaced.
    """
    p = _as_prob_vector(probs)
    t = _check_class(true_class, p.size, "true_class")
    logp = p.clamp(PROB_FLOOR, 1.0).log()
    others = [j for j in range(p.size) if j != t]
    margin = logp.gather([t]).sum() - logp.gather(others).max()
    return margin.relu()


def targeted_margin_loss(probs, target_class: int) -> Tensor:
    """Mirror of :func:`margin_loss` driving the target class to the top.

    Returns ``max(max_{j != target} log p_j - log p_target, 0)``: zero exactly
    when the target class is already top-1.
    """
    p = _as_prob_vector(probs)
    t = _check_class(target_class, p.size, "target_class")
    logp = p.clamp(PROB_FLOOR, 1.0).log()
    others = [j for j in range(p.size) if j != t]
    margin = logp.gather(others).max() - logp.gather([t]).sum()
    return margin.relu()


def attack_objective(probs, class_idx: int, mode: str) -> float:
    """Monotone progress indicator for logging: p(class) or 1 - p(class).

    Untargeted runs want the true-class probability to fall; targeted runs
    want the target-class probability to rise. Not used for optimization.
    """
    p = np.asarray(probs.data if isinstance(probs, Tensor) else probs, dtype=np.float64)
    c = _check_class(class_idx, p.size, "class")
    if mode == "untargeted":
        return float(p[c])
    if mode == "targeted":
        return float(1.0 - p[c])
    raise ValueError(f"unknown mode {mode!r}")


def masked_mse(predicted: Tensor, reference, coords) -> Tensor:
    """Mean squared error restricted to a set of flat coordinates.

    ``coords`` indexes the flattened tensors; with the full support this is
    the plain MSE. The mean (rather than sum) convention keeps fine-tuning
    learning rates insensitive to the number of selected coordinates.
    """
    pred = predicted if isinstance(predicted, Tensor) else Tensor(predicted)
    ref = reference if isinstance(reference, Tensor) else Tensor(reference)
    if pred.shape != ref.shape:
        raise ValueError(f"shape mismatch: predicted {pred.shape} vs reference {ref.shape}")
    idx = np.asarray(coords, dtype=np.int64).reshape(-1)
    if idx.size == 0:
        raise ValueError("masked_mse needs a nonempty coordinate set")
    diff = pred.gather(idx) - ref.gather(idx)
    return (diff * diff).sum() * (1.0 / idx.size)
