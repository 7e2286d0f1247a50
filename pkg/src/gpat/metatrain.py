"""Gradient-pair task construction and first-order meta-training.

A task bundles images with the input gradients of one source classifier's
margin loss. Meta-training interleaves per-task adaptation (a few descent
steps on sampled pairs) with an interpolation step that moves the shared
initialization toward the adapted weights, yielding an attacker that
fine-tunes quickly on models it never saw.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from gpat import tensor as T
from gpat.loss import margin_loss, masked_mse
from gpat.nn import AttackerModel
from gpat.tensor import ParamSet, Tensor

__all__ = [
    "GradientPair",
    "Task",
    "MetaConfig",
    "generate_pairs",
    "inner_adapt",
    "reptile_step",
    "train_meta_attacker",
    "save_tasks",
    "load_tasks",
]


@dataclass(frozen=True)
class GradientPair:
    image: np.ndarray
    gradient: np.ndarray

    def __post_init__(self):
        if self.image.shape != self.gradient.shape:
            raise ValueError("image and gradient shapes differ")
        if not np.all(np.isfinite(self.gradient)):
            raise ValueError("gradient contains non-finite entries")


@dataclass(frozen=True)
class Task:
    """All gradient pairs drawn from one source model, stacked (P, C, H, W)."""

    model_id: int
    images: np.ndarray
    gradients: np.ndarray

    def __post_init__(self):
        if self.images.shape != self.gradients.shape:
            raise ValueError("images and gradients shapes differ")
        if len(self.images) == 0:
            raise ValueError("task must contain at least one pair")
        if not np.all(np.isfinite(self.gradients)):
            raise ValueError("gradients contain non-finite entries")

    def __len__(self) -> int:
        return len(self.images)

    def pair(self, i: int) -> GradientPair:
        return GradientPair(self.images[i], self.gradients[i])


@dataclass(frozen=True)
class MetaConfig:
    inner_lr: float = 0.01
    inner_steps: int = 1
    outer_epsilon: float = 0.01
    k_samples: int = 8
    outer_iters: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.inner_lr < 0:
            raise ValueError(f"inner_lr must be >= 0, got {self.inner_lr}")
        if not 1 <= self.inner_steps <= 5:
            raise ValueError(f"inner_steps must be in [1, 5], got {self.inner_steps}")
        if not 0 < self.outer_epsilon <= 1:
            raise ValueError(f"outer_epsilon must be in (0, 1], got {self.outer_epsilon}")
        if self.k_samples < 1:
            raise ValueError(f"k_samples must be >= 1, got {self.k_samples}")
        if self.outer_iters < 0:
            raise ValueError(f"outer_iters must be >= 0, got {self.outer_iters}")


def generate_pairs(model, images: np.ndarray, labels: np.ndarray,
                   keep_zero_grad: bool = True) -> Task:
    """Backpropagate each image's margin loss to the input, collect the maps.

    Flat-loss images (already confidently misclassified) produce all-zero
    gradients and are kept by default; pass ``keep_zero_grad=False`` to
    drop them.
    """
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) != len(labels):
        raise ValueError("images and labels disagree in length")
    grads = np.zeros_like(images)
    for i in range(len(images)):
        x = Tensor(images[i], requires_grad=True)
        loss = margin_loss(model.probs(x), int(labels[i]))
        loss.backward()
        grads[i] = x.grad
    if not keep_zero_grad:
        keep = np.array([g.any() for g in grads], dtype=bool)
        images, grads = images[keep], grads[keep]
    return Task(model_id=model.model_id if model.model_id is not None else -1,
                images=images, gradients=grads)


def inner_adapt(attacker: AttackerModel, task: Task, config: MetaConfig,
                rng: np.random.Generator) -> tuple[AttackerModel, float]:
    """Adapt a copy of the attacker to one task; the original is untouched.

    Samples K pairs without replacement, then takes ``inner_steps`` descent
    steps on the full-support reconstruction error with batch statistics
    (running buffers update on the copy). Returns the adapted copy and the
    pre-update loss of the first step.
    """
    if config.k_samples > len(task):
        raise ValueError(f"k_samples={config.k_samples} exceeds task size {len(task)}")
    adapted = attacker.copy()
    take = rng.choice(len(task), size=config.k_samples, replace=False)
    xb = Tensor(task.images[take])
    target = Tensor(task.gradients[take])
    coords = np.arange(target.size)
    first_loss = None
    for _ in range(config.inner_steps):
        pred = adapted.forward(xb, train=True)
        loss = masked_mse(pred, target, coords)
        if first_loss is None:
            first_loss = loss.item()
        adapted.params.zero_grad()
        loss.backward()
        if config.inner_lr > 0:
            for p in adapted.params.tensors():
                p.data -= config.inner_lr * p.grad
    return adapted, first_loss


def reptile_step(theta: ParamSet, adapted: list[ParamSet], epsilon: float) -> ParamSet:
    """Interpolate toward the mean of adapted parameter sets.

    theta + epsilon * mean(theta_i' - theta), elementwise. The per-entry
    deltas are sorted before summation so the result is bit-identical under
    any permutation of ``adapted``.
    """
    if not adapted:
        raise ValueError("reptile_step needs at least one adapted parameter set")
    base_shapes = theta.shapes()
    for cand in adapted:
        if cand.shapes() != base_shapes:
            raise ValueError("adapted parameter set is not shape-compatible with theta")
    out = ParamSet()
    n = len(adapted)
    for name, t in theta.items():
        deltas = np.stack([cand[name].data - t.data for cand in adapted], axis=0)
        deltas.sort(axis=0)
        mean_delta = deltas.sum(axis=0) / n
        out.add(name, Tensor(t.data + epsilon * mean_delta,
                             requires_grad=t.requires_grad))
    return out


def train_meta_attacker(tasks: list[Task], attacker: AttackerModel,
                        config: MetaConfig) -> tuple[AttackerModel, list[float]]:
    """Outer loop: adapt to every task, then interpolate the shared weights.

    Tasks are processed in model-id order with per-(iteration, task) sample
    seeds, so the run is deterministic and task list order is irrelevant.
    Updates ``attacker`` in place and returns it with the per-iteration mean
    pre-adaptation loss curve.
    """
    if len(tasks) < 2:
        warnings.warn("meta-training with fewer than 2 tasks degenerates to "
                      "plain adaptation on one model", stacklevel=2)
    ordered = sorted(tasks, key=lambda t: t.model_id)
    ids = [t.model_id for t in ordered]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate task model ids: {ids}")
    curve: list[float] = []
    for outer in range(config.outer_iters):
        adapted_params: list[ParamSet] = []
        adapted_buffers: list[ParamSet] = []
        losses = []
        for task in ordered:
            rng = np.random.default_rng(
                np.random.SeedSequence((config.seed, outer, task.model_id)))
            adapted, first_loss = inner_adapt(attacker, task, config, rng)
            adapted_params.append(adapted.params)
            adapted_buffers.append(adapted.buffers)
            losses.append(first_loss)
        new_params = reptile_step(attacker.params, adapted_params, config.outer_epsilon)
        new_buffers = reptile_step(attacker.buffers, adapted_buffers, config.outer_epsilon)
        for name, t in attacker.params.items():
            t.data = new_params[name].data
        for name, t in attacker.buffers.items():
            t.data = new_buffers[name].data
        curve.append(float(np.mean(losses)))
    return attacker, curve


def save_tasks(tasks: list[Task], path) -> None:
    """Persist tasks in the tensor container plus a JSON manifest sidecar."""
    path = Path(path)
    store = ParamSet()
    manifest = []
    for j, task in enumerate(tasks):
        store.add(f"task{j}.images", Tensor(task.images))
        store.add(f"task{j}.gradients", Tensor(task.gradients))
        manifest.append({"model_id": int(task.model_id), "pairs": len(task),
                         "image_shape": list(task.images.shape[1:])})
    store.save(path)
    Path(str(path) + ".json").write_text(json.dumps(manifest, sort_keys=True))


def load_tasks(path) -> list[Task]:
    path = Path(path)
    manifest = json.loads(Path(str(path) + ".json").read_text())
    store = ParamSet.load(path)
    tasks = []
    for j, entry in enumerate(manifest):
        images = store[f"task{j}.images"].data
        grads = store[f"task{j}.gradients"].data
        if images.shape[0] != entry["pairs"] or list(images.shape[1:]) != entry["image_shape"]:
            raise ValueError(f"task {j}: container data disagrees with manifest")
        tasks.append(Task(model_id=entry["model_id"], images=images, gradients=grads))
    return tasks
