"""Shared fixtures: synthetic scalar oracles and a small trained testbed."""

import numpy as np
import pytest

from gpat import data, nn
from gpat.oracle import BudgetExhausted, QueryLedger


class SynthOracle:
    """Scalar function behind the oracle interface, for estimator tests."""

    def __init__(self, fn, budget=10**9):
        self.fn = fn
        self.budget = budget
        self.ledger = QueryLedger()

    def loss(self, x, class_idx, mode, phase="estimate"):
        if self.ledger.total >= self.budget:
            raise BudgetExhausted(self.budget, self.ledger.snapshot())
        self.ledger.record(phase)
        return float(self.fn(np.asarray(x, dtype=np.float64)))


@pytest.fixture
def synth_oracle_factory():
    return SynthOracle


@pytest.fixture(scope="session")
def small_dataset():
    return data.gen_synthetic(classes=3, n=360, seed=11)


@pytest.fixture(scope="session")
def trained_classifier(small_dataset):
    model = nn.build_toy_classifier(0, classes=3, seed=7)
    report = nn.train_classifier(model, small_dataset, epochs=8, lr=0.15, seed=7)
    assert report.test_accuracy >= 0.9, "fixture classifier failed to train"
    return model


@pytest.fixture(scope="session")
def correct_test_index(small_dataset, trained_classifier):
    """Index of a test image the fixture classifier gets right."""
    for i in range(len(small_dataset.test_images)):
        probs = trained_classifier.predict_probs(small_dataset.test_images[i])
        if probs.argmax() == small_dataset.test_labels[i]:
            return i
    raise AssertionError("no correctly classified test image")
