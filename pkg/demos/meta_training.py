"""Meta-train the attacker on two source classifiers, then adapt it.

Shows the training curve dropping and the adapted meta attacker beating a
freshly initialized one on a model neither has seen. Runs in about a
minute on a laptop CPU.

    python3 demos/meta_training.py
"""

import warnings

import numpy as np

from gpat.data import gen_synthetic
from gpat.loss import masked_mse
from gpat.metatrain import (MetaConfig, generate_pairs, inner_adapt,
                            train_meta_attacker)
from gpat.nn import build_meta_attacker, build_toy_classifier, train_classifier
from gpat.tensor import Tensor, no_grad


def main():
    ds = gen_synthetic(classes=3, n=400, seed=21)

    print("== source tasks: (image, input-gradient) pairs per classifier ==")
    tasks = []
    for model_id in (0, 1):
        model = build_toy_classifier(model_id, classes=3,
                                     input_shape=(1, 16, 16), seed=model_id)
        train_classifier(model, ds, epochs=8, lr=0.15, seed=model_id)
        task = generate_pairs(model, ds.train_images[:100],
                              ds.train_labels[:100])
        tasks.append(task)
        print(f"model {model_id}: {len(task)} pairs, mean |grad| "
              f"{np.mean(np.abs(task.gradients)):.4f}")

    print("\n== meta-training (interpolate toward task-adapted weights) ==")
    attacker = build_meta_attacker(1, "small", seed=0)
    config = MetaConfig(inner_lr=0.1, inner_steps=3, outer_epsilon=0.5,
                        k_samples=16, outer_iters=120, seed=0)
    _, curve = train_meta_attacker(tasks, attacker, config)
    for i in (0, 29, 59, 119):
        print(f"outer iter {i + 1:3d}: mean pre-update loss {curve[i]:.4f}")

    print("\n== adaptation on an unseen classifier ==")
    held_out = build_toy_classifier(2, classes=3,
                                    input_shape=(1, 16, 16), seed=2)
    train_classifier(held_out, ds, epochs=16, lr=0.25, seed=2)
    new_task = generate_pairs(held_out, ds.train_images[60:120],
                              ds.train_labels[60:120])
    adapt_cfg = MetaConfig(inner_lr=0.01, inner_steps=5, outer_epsilon=0.5,
                           k_samples=8, outer_iters=1, seed=0)
    for label, start in (("meta-trained", attacker),
                         ("random init ", build_meta_attacker(1, "small", seed=99))):
        adapted, first = inner_adapt(start, new_task, adapt_cfg,
                                     np.random.default_rng(123))
        take = np.random.default_rng(123).choice(len(new_task), size=8,
                                                 replace=False)
        xb = Tensor(new_task.images[take])
        gb = Tensor(new_task.gradients[take])
        with no_grad():
            after = masked_mse(adapted.forward(xb, train=False), gb,
                               np.arange(gb.data.size)).item()
        print(f"{label}: loss before adapting {first:.4f}, after 5 steps "
              f"{after:.4f}")


if __name__ == "__main__":
    warnings.filterwarnings("ignore", category=UserWarning)
    main()
