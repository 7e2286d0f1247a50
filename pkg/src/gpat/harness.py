"""Experiment orchestration: build the testbed, run attack suites, report.

The default testbed is fully synthetic so everything runs from a clean
checkout: a separable image family, several small source classifiers, one
held-out target, and a meta-trained attacker. Reports carry a versioned
schema and keep timestamps out of the body so identical seeds give
byte-identical bodies.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from gpat import tensor as T
from gpat.attack import (AttackConfig, fd_baseline_attack, meta_attack,
                         nes_baseline_attack)
from gpat.data import Dataset, gen_synthetic, load_dataset, save_dataset
from gpat.loss import margin_loss, targeted_margin_loss
from gpat.metatrain import (MetaConfig, generate_pairs, load_tasks, save_tasks,
                            train_meta_attacker)
from gpat.nn import (AttackerModel, ClassifierModel, build_meta_attacker,
                     build_toy_classifier, train_classifier)
from gpat.oracle import BlackBoxOracle
from gpat.tensor import Tensor

__all__ = [
    "ExperimentConfig",
    "SuiteReport",
    "StageError",
    "METHODS",
    "run_suite",
    "query_curve",
    "cosine_diagnostic",
    "sweep",
    "whitebox_input_grad",
]

METHODS = ("meta", "meta_random_init", "fd_baseline", "nes_baseline")

# per-model-id (epochs, lr) recipes that reach >= 0.95 test accuracy on the
# synthetic family; the pure-MLP stacks need longer schedules
_TRAIN_RECIPES = {0: (8, 0.15), 1: (8, 0.15), 2: (16, 0.25),
                  3: (8, 0.15), 4: (8, 0.15), 5: (16, 0.25)}

SCHEMA_VERSION = "v1"


class StageError(RuntimeError):
    """A suite stage failed; ``stage`` names it, artifacts so far persist."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def _desk_attack_config() -> AttackConfig:
    # calibrated for the 16x16 synthetic testbed; class defaults keep the
    # reference full-scale setting
    return AttackConfig(m=5, q=32, beta=0.5, budget=3000, max_iters=3000)


def _desk_meta_config() -> MetaConfig:
    return MetaConfig(inner_lr=0.1, inner_steps=3, outer_epsilon=0.5,
                      k_samples=16, outer_iters=150, seed=0)


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a suite run needs; target model is held out of training."""

    classes: int = 4
    image_shape: tuple = (1, 16, 16)
    dataset_n: int = 600
    source_ids: tuple = (0, 1, 2, 4)
    target_id: int = 3
    attack: AttackConfig = field(default_factory=_desk_attack_config)
    meta: MetaConfig = field(default_factory=_desk_meta_config)
    image_count: int = 50
    pairs_per_task: int = 120
    seed: int = 0
    k: int | None = None
    out_dir: str | None = None

    def __post_init__(self):
        if self.target_id in self.source_ids:
            raise ValueError(f"target model {self.target_id} must be held out "
                             f"of source ids {self.source_ids}")
        if len(set(self.source_ids)) != len(self.source_ids):
            raise ValueError(f"duplicate source ids {self.source_ids}")
        if self.image_count < 1:
            raise ValueError(f"image_count must be >= 1, got {self.image_count}")
        if self.pairs_per_task < self.meta.k_samples:
            raise ValueError("pairs_per_task smaller than meta.k_samples")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["image_shape"] = list(self.image_shape)
        d["source_ids"] = list(self.source_ids)
        d["attack"]["clip"] = list(self.attack.clip)
        return d


@dataclass
class SuiteReport:
    """Per-method rows plus aggregates, recomputable from the rows.

    Success rate counts all attempted images; mean L2 and mean queries
    average over successes only (None when nothing succeeded).
    """

    schema: str
    config: dict
    methods: dict          # name -> {"rows": [...], "aggregates": {...}}

    @staticmethod
    def aggregate(rows: list[dict]) -> dict:
        succ = [r for r in rows if r["success"]]
        return {
            "attempted": len(rows),
            "successes": len(succ),
            "success_rate": (len(succ) / len(rows)) if rows else 0.0,
            "mean_l2": (float(np.mean([r["l2"] for r in succ])) if succ else None),
            "mean_queries": (float(np.mean([r["queries"] for r in succ]))
                             if succ else None),
        }

    def verify(self, tol: float = 1e-9) -> None:
        """Recompute every aggregate from its rows; raise on disagreement."""
        for name, block in self.methods.items():
            fresh = self.aggregate(block["rows"])
            stored = block["aggregates"]
            for key, want in fresh.items():
                got = stored[key]
                if want is None or got is None:
                    if want is not got:
                        raise AssertionError(f"{name}.{key}: {got} vs {want}")
                elif abs(got - want) > tol:
                    raise AssertionError(f"{name}.{key}: {got} vs {want}")

    def body(self) -> dict:
        return {"schema": self.schema, "config": self.config,
                "methods": self.methods}

    def to_json(self) -> str:
        return json.dumps(
            {"timestamp": datetime.now(timezone.utc).isoformat(),
             "body": self.body()},
            sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def from_json(cls, text: str) -> "SuiteReport":
        body = json.loads(text)["body"]
        return cls(schema=body["schema"], config=body["config"],
                   methods=body["methods"])


def _train_toy(model_id: int, classes: int, shape, dataset: Dataset,
               seed: int) -> ClassifierModel:
    epochs, lr = _TRAIN_RECIPES.get(model_id, (8, 0.15))
    model = build_toy_classifier(model_id, classes, input_shape=shape, seed=model_id)
    train_classifier(model, dataset, epochs=epochs, lr=lr, seed=seed + model_id)
    return model


class _Stage:
    """Context manager tagging failures with the stage name."""

    def __init__(self, name: str):
        self.name = name

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and not isinstance(exc, StageError):
            raise StageError(self.name, exc) from exc
        return False


@dataclass
class Testbed:
    """Built artifacts a suite run attacks against."""

    dataset: Dataset
    sources: list
    target: ClassifierModel
    tasks: list
    attacker: AttackerModel | None
    eligible: np.ndarray   # test indices the target classifies correctly


def build_testbed(config: ExperimentConfig, need_attacker: bool = True,
                  reuse_artifacts: bool = False) -> Testbed:
    """Stages: dataset, train-targets, gen-pairs, meta-train, selection.

    With ``reuse_artifacts`` and an out_dir, previously saved artifacts are
    loaded instead of rebuilt; anything missing is built and saved.
    """
    out = Path(config.out_dir) if config.out_dir else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    def _cached(name):
        return out / name if (reuse_artifacts and out is not None) else None

    with _Stage("dataset"):
        path = _cached("dataset.gpat")
        if path is not None and path.exists():
            dataset = load_dataset(path)
        else:
            dataset = gen_synthetic(config.classes, config.image_shape,
                                    n=config.dataset_n, seed=config.seed)
            if out is not None:
                save_dataset(dataset, out / "dataset.gpat")

    with _Stage("train-targets"):
        models = {}
        for mid in tuple(config.source_ids) + (config.target_id,):
            path = _cached(f"classifier{mid}.gpat")
            if path is not None and path.exists():
                models[mid] = ClassifierModel.load(path)
            else:
                models[mid] = _train_toy(mid, config.classes, config.image_shape,
                                         dataset, config.seed)
                if out is not None:
                    models[mid].save(out / f"classifier{mid}.gpat")
        sources = [models[m] for m in config.source_ids]
        target = models[config.target_id]

    with _Stage("gen-pairs"):
        path = _cached("tasks.gpat")
        if path is not None and path.exists():
            tasks = load_tasks(path)
        else:
            count = config.pairs_per_task
            tasks = [generate_pairs(m, dataset.train_images[:count],
                                    dataset.train_labels[:count])
                     for m in sources]
            if out is not None:
                save_tasks(tasks, out / "tasks.gpat")

    attacker = None
    if need_attacker:
        with _Stage("meta-train"):
            path = _cached("attacker.gpat")
            if path is not None and path.exists():
                attacker = AttackerModel.load(path)
            else:
                attacker = build_meta_attacker(config.image_shape[0], "small",
                                               seed=config.seed)
                meta_cfg = dataclasses.replace(config.meta, seed=config.seed)
                train_meta_attacker(tasks, attacker, meta_cfg)
                if out is not None:
                    attacker.save(out / "attacker.gpat")

    with _Stage("selection"):
        probs = np.stack([target.predict_probs(im) for im in dataset.test_images])
        eligible = np.flatnonzero(probs.argmax(axis=1) == dataset.test_labels)
        if len(eligible) < config.image_count:
            raise ValueError(f"only {len(eligible)} correctly-classified test "
                             f"images, need {config.image_count}")
        eligible = eligible[:config.image_count]

    return Testbed(dataset=dataset, sources=sources, target=target,
                   tasks=tasks, attacker=attacker, eligible=eligible)


def _attack_one(method: str, bed: Testbed, config: ExperimentConfig,
                image_index: int, rand_attacker=None, hook=None):
    x0 = bed.dataset.test_images[image_index]
    y0 = int(bed.dataset.test_labels[image_index])
    cfg = dataclasses.replace(config.attack, seed=config.seed ^ int(image_index))
    if cfg.mode == "targeted" and cfg.target_class == "next":
        cfg = dataclasses.replace(cfg, target_class=(y0 + 1) % bed.dataset.classes)
    oracle = BlackBoxOracle(bed.target, budget=cfg.budget, k=config.k)
    if method == "meta":
        res = meta_attack(x0, y0, bed.attacker, oracle, cfg, prediction_hook=hook)
    elif method == "meta_random_init":
        res = meta_attack(x0, y0, rand_attacker, oracle, cfg, prediction_hook=hook)
    elif method == "fd_baseline":
        res = fd_baseline_attack(x0, y0, oracle, cfg)
    elif method == "nes_baseline":
        res = nes_baseline_attack(x0, y0, oracle, cfg)
    else:
        raise ValueError(f"unknown method {method!r}")
    if res.queries != oracle.ledger.total:
        raise AssertionError("result query count disagrees with ledger")
    return res, oracle, cfg


def run_suite(config: ExperimentConfig, methods=("meta", "fd_baseline"),
              reuse_artifacts: bool = False, testbed: Testbed | None = None) -> SuiteReport:
    """Attack the same correctly-classified images with each method.

    Images run sequentially in index order with per-image oracle instances
    and seed = config.seed XOR image index, so reports are reproducible and
    method blocks are directly comparable.
    """
    for m in methods:
        if m not in METHODS:
            raise ValueError(f"unknown method {m!r}, expected subset of {METHODS}")
    need_attacker = any(m == "meta" for m in methods)
    if testbed is None:
        testbed = build_testbed(config, need_attacker=need_attacker,
                                reuse_artifacts=reuse_artifacts)
    if need_attacker and testbed.attacker is None:
        raise ValueError("methods include 'meta' but the testbed has no attacker")
    rand_attacker = None
    if "meta_random_init" in methods:
        rand_attacker = build_meta_attacker(config.image_shape[0], "small",
                                            seed=config.seed + 1000003)
    blocks = {}
    with _Stage("attack"):
        for method in methods:
            rows = []
            for image_index in testbed.eligible:
                res, oracle, cfg = _attack_one(method, testbed, config,
                                               int(image_index),
                                               rand_attacker=rand_attacker)
                rows.append({
                    "image_index": int(image_index),
                    "true_class": int(testbed.dataset.test_labels[image_index]),
                    "target_class": (cfg.target_class
                                     if cfg.mode == "targeted" else None),
                    "success": bool(res.success),
                    "queries": int(res.queries),
                    "l2": float(res.l2),
                    "iterations": int(res.iterations),
                })
            blocks[method] = {"rows": rows,
                              "aggregates": SuiteReport.aggregate(rows)}
    report = SuiteReport(schema=SCHEMA_VERSION, config=config.to_dict(),
                         methods=blocks)
    report.verify()
    if config.out_dir:
        report.save(Path(config.out_dir) / "report.json")
    return report


def query_curve(config: ExperimentConfig, budgets,
                methods=("meta", "fd_baseline"), reuse_artifacts: bool = False,
                report: SuiteReport | None = None) -> dict:
    """Success rate under successively larger budget caps, per method.

    Attacks run once at the largest budget; smaller caps are scored by
    replay: a run counts iff it succeeded within the cap. Rates are
    therefore non-decreasing, and the largest cap reproduces the headline
    suite rates exactly.
    """
    budgets = [int(b) for b in budgets]
    if not budgets or any(b2 <= b1 for b1, b2 in zip(budgets, budgets[1:])):
        raise ValueError("budgets must be a nonempty ascending list")
    if report is None:
        config = dataclasses.replace(
            config, attack=dataclasses.replace(config.attack, budget=budgets[-1]))
        report = run_suite(config, methods=methods, reuse_artifacts=reuse_artifacts)
    curve = {}
    for method, block in report.methods.items():
        rows = block["rows"]
        rates = []
        for cap in budgets:
            wins = sum(1 for r in rows if r["success"] and r["queries"] <= cap)
            rates.append(wins / len(rows) if rows else 0.0)
        curve[method] = rates
    return {"budgets": budgets, "success_rates": curve,
            "headline": {m: b["aggregates"]["success_rate"]
                         for m, b in report.methods.items()}}


def whitebox_input_grad(model: ClassifierModel, x: np.ndarray, class_idx: int,
                        mode: str) -> np.ndarray:
    """Analytic input gradient of the mode's margin loss; diagnostics only."""
    xt = Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)
    probs = model.probs(xt)
    loss = (margin_loss(probs, class_idx) if mode == "untargeted"
            else targeted_margin_loss(probs, class_idx))
    loss.backward()
    return xt.grad


def cosine_diagnostic(config: ExperimentConfig, events: int = 50,
                      reuse_artifacts: bool = False,
                      testbed: Testbed | None = None) -> dict:
    """Cosine between attacker-predicted maps and white-box gradients.

    Collects at least ``events`` prediction events for the meta-trained and
    the random-init attacker over the same images. The white-box path never
    touches the oracle; ledgers are audited around every hook call.
    Zero-norm events (flat loss) are excluded from means and counted.
    """
    if testbed is None:
        testbed = build_testbed(config, need_attacker=True,
                                reuse_artifacts=reuse_artifacts)
    rand_attacker = build_meta_attacker(config.image_shape[0], "small",
                                        seed=config.seed + 1000003)
    out = {}
    for name, attacker in (("meta", testbed.attacker),
                           ("random_init", rand_attacker)):
        cosines: list[float] = []
        skipped = 0
        for image_index in testbed.eligible:
            x0 = testbed.dataset.test_images[image_index]
            y0 = int(testbed.dataset.test_labels[image_index])
            cls = (y0 if config.attack.mode == "untargeted"
                   else (y0 + 1) % testbed.dataset.classes)
            cfg = dataclasses.replace(config.attack,
                                      seed=config.seed ^ int(image_index))
            if cfg.mode == "targeted" and cfg.target_class == "next":
                cfg = dataclasses.replace(cfg, target_class=cls)
            oracle = BlackBoxOracle(testbed.target, budget=cfg.budget, k=config.k)
            zero_norm = [0]

            def hook(x_t, g_pred, _cls=cls, _mode=cfg.mode, _oracle=oracle,
                     _zero=zero_norm):
                before = _oracle.ledger.total
                g_true = whitebox_input_grad(testbed.target, x_t, _cls, _mode)
                if _oracle.ledger.total != before:
                    raise AssertionError("diagnostic touched the query ledger")
                norm_pred = np.linalg.norm(g_pred.reshape(-1))
                norm_true = np.linalg.norm(g_true.reshape(-1))
                if norm_pred == 0.0 or norm_true == 0.0:
                    _zero[0] += 1
                    return
                cosines.append(float(g_pred.reshape(-1) @ g_true.reshape(-1)
                                     / (norm_pred * norm_true)))

            meta_attack(x0, y0, attacker, oracle, cfg, prediction_hook=hook)
            skipped += zero_norm[0]
            if len(cosines) >= events:
                break
        if len(cosines) < events:
            raise ValueError(f"{name}: only {len(cosines)} prediction events, "
                             f"need {events}")
        arr = np.asarray(cosines[:events])
        out[name] = {"mean": float(arr.mean()), "std": float(arr.std()),
                     "events": int(len(arr)), "skipped_zero_norm": skipped}
    return out


def sweep(config: ExperimentConfig, q_values, beta_values,
          methods=("meta",), reuse_artifacts: bool = False) -> str:
    """Grid of suite runs over (q, beta); returns CSV text.

    Columns: q, beta, method, success_rate, mean_l2, mean_queries,
    attempted. Empty cells (no successes) leave the mean columns blank.
    """
    q_values = [int(q) for q in q_values]
    beta_values = [float(b) for b in beta_values]
    if not q_values or not beta_values:
        raise ValueError("sweep needs nonempty q and beta grids")
    need_attacker = any(m == "meta" for m in methods)
    testbed = build_testbed(config, need_attacker=need_attacker,
                            reuse_artifacts=reuse_artifacts)
    lines = ["q,beta,method,success_rate,mean_l2,mean_queries,attempted"]
    for q in q_values:
        for beta in beta_values:
            cell = dataclasses.replace(
                config, attack=dataclasses.replace(config.attack, q=q, beta=beta),
                out_dir=None)
            rep = run_suite(cell, methods=methods, testbed=testbed)
            for method, block in rep.methods.items():
                agg = block["aggregates"]
                ml = "" if agg["mean_l2"] is None else repr(agg["mean_l2"])
                mq = "" if agg["mean_queries"] is None else repr(agg["mean_queries"])
                lines.append(f"{q},{beta},{method},{agg['success_rate']!r},"
                             f"{ml},{mq},{agg['attempted']}")
    text = "\n".join(lines) + "\n"
    if config.out_dir:
        (Path(config.out_dir) / "sweep.csv").write_text(text)
    return text
