"""Show the toy classifier family and the attacker autoencoder.

Trains one classifier on synthetic data and pushes a few image sizes
through the attacker to show the shape-preserving decode path.

    python3 demos/model_zoo.py
"""

import numpy as np

from gpat.data import gen_synthetic
from gpat.nn import (build_meta_attacker, build_toy_classifier,
                     train_classifier)


def describe(spec):
    parts = []
    for layer in spec.layers:
        desc = layer.kind
        if layer.features:
            desc += f"({layer.features})"
        parts.append(desc)
    return " -> ".join(parts)


def show_family():
    print("== toy classifier family ==")
    for model_id in range(6):
        model = build_toy_classifier(model_id, classes=4,
                                     input_shape=(1, 16, 16), seed=model_id)
        n_params = sum(int(np.prod(s)) for s in model.params.shapes().values())
        print(f"id {model_id}: {describe(model.spec):60s} {n_params:6d} params")


def train_one():
    print("\n== training id 0 on synthetic blobs ==")
    ds = gen_synthetic(classes=4, n=400, seed=5)
    model = build_toy_classifier(0, classes=4, input_shape=(1, 16, 16), seed=0)
    report = train_classifier(model, ds, epochs=8, lr=0.15, seed=0)
    print(f"train accuracy {report.train_accuracy:.3f}, "
          f"test accuracy {report.test_accuracy:.3f}")
    probs = model.predict_probs(ds.test_images[0])
    print(f"sample probs: {np.array2string(probs, precision=3)} "
          f"(label {ds.test_labels[0]})")


def attacker_shapes():
    print("\n== attacker autoencoder is shape preserving ==")
    attacker = build_meta_attacker(1, "small", seed=0)
    for size in ((1, 16, 16), (1, 28, 28), (1, 17, 21)):
        out = attacker.predict(np.zeros(size))
        print(f"input {'x'.join(map(str, size))} -> map "
              f"{'x'.join(map(str, out.shape))}")


if __name__ == "__main__":
    show_family()
    train_one()
    attacker_shapes()
