"""Command-line front end for the attack pipeline.

Subcommands mirror the pipeline stages: gen-data, train-targets, gen-pairs,
meta-train, attack, suite, curve, sweep, diagnose. A JSON file passed via
--config overrides any flag value. Exit codes: 0 success, 1 validation
error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from gpat import harness
from gpat.attack import (AttackConfig, fd_baseline_attack, meta_attack,
                         nes_baseline_attack)
from gpat.data import gen_synthetic, load_dataset, save_dataset
from gpat.metatrain import (MetaConfig, generate_pairs, load_tasks, save_tasks,
                            train_meta_attacker)
from gpat.nn import AttackerModel, ClassifierModel, build_meta_attacker
from gpat.oracle import BlackBoxOracle

__all__ = ["main"]


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on bad flags; the contract here is exit 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _data_root() -> Path | None:
    root = os.environ.get("GPAT_DATA_DIR")
    return Path(root) if root else None


def _resolve_input(path: str | None, default_name: str, what: str) -> Path:
    """Explicit path wins; otherwise fall back to GPAT_DATA_DIR/<name>."""
    if path is not None:
        return Path(path)
    root = _data_root()
    if root is not None and (root / default_name).exists():
        return root / default_name
    raise ValueError(f"no {what} path given and GPAT_DATA_DIR has no "
                     f"{default_name}")


def _apply_config_file(args: argparse.Namespace) -> argparse.Namespace:
    if getattr(args, "config", None) is None:
        return args
    overrides = json.loads(Path(args.config).read_text())
    if not isinstance(overrides, dict):
        raise ValueError("--config file must hold a JSON object")
    for key, value in overrides.items():
        attr = key.replace("-", "_")
        if not hasattr(args, attr):
            raise ValueError(f"--config key {key!r} matches no flag")
        setattr(args, attr, value)
    return args


def _parse_target_class(value):
    if value is None or value == "next":
        return value
    return int(value)


def _parse_ints(text: str) -> list[int]:
    return [int(tok) for tok in str(text).split(",") if tok != ""]


def _parse_floats(text: str) -> list[float]:
    return [float(tok) for tok in str(text).split(",") if tok != ""]


def _add_attack_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--m", type=int, default=5, help="estimation period")
    p.add_argument("--q", type=int, default=32, help="coordinates per estimation")
    p.add_argument("--beta", type=float, default=0.5, help="step size")
    p.add_argument("--budget", type=int, default=3000, help="query budget")
    p.add_argument("--mode", choices=("untargeted", "targeted"),
                   default="untargeted")
    p.add_argument("--target-class", default=None,
                   help="class index, or 'next' for (label+1) mod classes")
    p.add_argument("--k", type=int, default=None,
                   help="top-k feedback width (default: all classes)")
    p.add_argument("--h", type=float, default=1e-4, help="finite-difference step")
    p.add_argument("--max-iters", type=int, default=3000)
    p.add_argument("--finetune-steps", type=int, default=5)
    p.add_argument("--finetune-lr", type=float, default=1e-2)
    p.add_argument("--nes-n", type=int, default=50)
    p.add_argument("--nes-sigma", type=float, default=1e-3)


def _add_meta_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--inner-lr", type=float, default=0.1)
    p.add_argument("--inner-steps", type=int, default=3)
    p.add_argument("--epsilon", type=float, default=0.5, help="outer step")
    p.add_argument("--k-samples", type=int, default=16)
    p.add_argument("--outer-iters", type=int, default=150)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="output path")
    p.add_argument("--config", default=None, help="JSON file overriding flags")


def _attack_config(args) -> AttackConfig:
    return AttackConfig(
        m=args.m, q=args.q, beta=args.beta, budget=args.budget,
        max_iters=args.max_iters, mode=args.mode,
        target_class=_parse_target_class(args.target_class),
        h=args.h, seed=args.seed, finetune_steps=args.finetune_steps,
        finetune_lr=args.finetune_lr, nes_n=args.nes_n,
        nes_sigma=args.nes_sigma)


def _experiment_config(args, attack_cfg: AttackConfig) -> harness.ExperimentConfig:
    meta_cfg = MetaConfig(inner_lr=args.inner_lr, inner_steps=args.inner_steps,
                          outer_epsilon=args.epsilon, k_samples=args.k_samples,
                          outer_iters=args.outer_iters, seed=args.seed)
    return harness.ExperimentConfig(
        attack=attack_cfg, meta=meta_cfg, image_count=args.images,
        seed=args.seed, k=args.k, out_dir=args.out_dir)


def _cmd_gen_data(args) -> int:
    ds = gen_synthetic(classes=args.classes, shape=tuple(args.shape),
                       n=args.n, seed=args.seed)
    out = Path(args.out) if args.out else (_data_root() or Path(".")) / "dataset.gpat"
    save_dataset(ds, out)
    print(f"wrote {out} ({len(ds.train_images)} train / {len(ds.test_images)} test)")
    return 0


def _cmd_train_targets(args) -> int:
    ds = load_dataset(_resolve_input(args.data, "dataset.gpat", "dataset"))
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    for mid in _parse_ints(args.ids):
        model = harness._train_toy(mid, ds.classes, ds.image_shape, ds, args.seed)
        acc = model.accuracy(ds.test_images, ds.test_labels)
        model.save(out / f"classifier{mid}.gpat")
        print(f"classifier{mid}: test accuracy {acc:.3f}")
    return 0


def _cmd_gen_pairs(args) -> int:
    ds = load_dataset(_resolve_input(args.data, "dataset.gpat", "dataset"))
    models_dir = Path(args.models or ".")
    tasks = []
    for mid in _parse_ints(args.ids):
        model = ClassifierModel.load(models_dir / f"classifier{mid}.gpat")
        tasks.append(generate_pairs(model, ds.train_images[:args.count],
                                    ds.train_labels[:args.count]))
    out = Path(args.out or "tasks.gpat")
    save_tasks(tasks, out)
    print(f"wrote {out} ({len(tasks)} tasks x {args.count} pairs)")
    return 0


def _cmd_meta_train(args) -> int:
    tasks = load_tasks(_resolve_input(args.tasks, "tasks.gpat", "tasks"))
    channels = tasks[0].images.shape[1]
    attacker = build_meta_attacker(channels, args.variant, seed=args.seed)
    cfg = MetaConfig(inner_lr=args.inner_lr, inner_steps=args.inner_steps,
                     outer_epsilon=args.epsilon, k_samples=args.k_samples,
                     outer_iters=args.outer_iters, seed=args.seed)
    _, curve = train_meta_attacker(tasks, attacker, cfg)
    out = Path(args.out or "attacker.gpat")
    attacker.save(out)
    first = curve[0] if curve else float("nan")
    last = curve[-1] if curve else float("nan")
    print(f"wrote {out} (loss {first:.5f} -> {last:.5f} over {len(curve)} iters)")
    return 0


def _cmd_attack(args) -> int:
    cfg = _attack_config(args)
    ds = load_dataset(_resolve_input(args.data, "dataset.gpat", "dataset"))
    model = ClassifierModel.load(args.model)
    x0 = ds.test_images[args.index]
    y0 = int(ds.test_labels[args.index])
    if cfg.mode == "targeted" and cfg.target_class == "next":
        cfg = dataclasses.replace(cfg, target_class=(y0 + 1) % ds.classes)
    oracle = BlackBoxOracle(model, budget=cfg.budget, k=args.k)
    if args.method == "meta":
        attacker = AttackerModel.load(
            _resolve_input(args.attacker, "attacker.gpat", "attacker"))
        result = meta_attack(x0, y0, attacker, oracle, cfg)
    elif args.method == "fd":
        result = fd_baseline_attack(x0, y0, oracle, cfg)
    else:
        result = nes_baseline_attack(x0, y0, oracle, cfg)
    if args.out:
        result.save(args.out)
    if args.ledger:
        oracle.ledger.export_jsonl(args.ledger)
    if args.trace:
        result.save_trace(args.trace)
    if args.image_out:
        result.save_image(args.image_out)
    print(result.to_json())
    return 0


def _cmd_suite(args) -> int:
    methods = tuple(args.methods.split(","))
    cfg = _experiment_config(args, _attack_config(args))
    report = harness.run_suite(cfg, methods=methods,
                               reuse_artifacts=args.reuse_artifacts)
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return 0


def _cmd_curve(args) -> int:
    methods = tuple(args.methods.split(","))
    budgets = _parse_ints(args.budgets)
    cfg = _experiment_config(args, _attack_config(args))
    curve = harness.query_curve(cfg, budgets, methods=methods,
                                reuse_artifacts=args.reuse_artifacts)
    text = json.dumps(curve, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return 0


def _cmd_sweep(args) -> int:
    methods = tuple(args.methods.split(","))
    cfg = _experiment_config(args, _attack_config(args))
    csv = harness.sweep(cfg, _parse_ints(args.q_values),
                        _parse_floats(args.beta_values), methods=methods,
                        reuse_artifacts=args.reuse_artifacts)
    if args.out:
        Path(args.out).write_text(csv)
    print(csv, end="")
    return 0


def _cmd_diagnose(args) -> int:
    cfg = _experiment_config(args, _attack_config(args))
    diag = harness.cosine_diagnostic(cfg, events=args.events,
                                     reuse_artifacts=args.reuse_artifacts)
    text = json.dumps(diag, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return 0


def _build_parser() -> _Parser:
    parser = _Parser(prog="gpat",
                     description="meta-learned query-efficient black-box attacks")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[], help="generate the synthetic dataset")
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--n", type=int, default=600)
    p.add_argument("--shape", type=int, nargs=3, default=(1, 16, 16),
                   metavar=("C", "H", "W"))
    _add_common(p)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train-targets", help="train toy classifiers")
    p.add_argument("--data", default=None, help="dataset container path")
    p.add_argument("--ids", default="0,1,2,3,4", help="comma-separated model ids")
    _add_common(p)
    p.set_defaults(func=_cmd_train_targets)

    p = sub.add_parser("gen-pairs", help="build gradient-pair tasks")
    p.add_argument("--data", default=None)
    p.add_argument("--models", default=None, help="directory with classifiers")
    p.add_argument("--ids", default="0,1,2,4")
    p.add_argument("--count", type=int, default=120, help="pairs per task")
    _add_common(p)
    p.set_defaults(func=_cmd_gen_pairs)

    p = sub.add_parser("meta-train", help="meta-train the attacker")
    p.add_argument("--tasks", default=None, help="task container path")
    p.add_argument("--variant", choices=("small", "large"), default="small")
    _add_meta_flags(p)
    _add_common(p)
    p.set_defaults(func=_cmd_meta_train)

    p = sub.add_parser("attack", help="attack one test image")
    p.add_argument("--data", default=None)
    p.add_argument("--model", required=True, help="target classifier path")
    p.add_argument("--attacker", default=None, help="trained attacker path")
    p.add_argument("--method", choices=("meta", "fd", "nes"), default="meta")
    p.add_argument("--index", type=int, default=0, help="test image index")
    p.add_argument("--ledger", default=None, help="write query ledger JSONL here")
    p.add_argument("--trace", default=None, help="write iteration trace JSONL here")
    p.add_argument("--image-out", default=None, help="write adversarial image here")
    _add_attack_flags(p)
    _add_common(p)
    p.set_defaults(func=_cmd_attack)

    for name, fn, extra in (("suite", _cmd_suite, ()),
                            ("curve", _cmd_curve, ("budgets",)),
                            ("sweep", _cmd_sweep, ("grids",)),
                            ("diagnose", _cmd_diagnose, ("events",))):
        p = sub.add_parser(name, help=f"run the {name} experiment")
        p.add_argument("--methods", default="meta,fd_baseline")
        p.add_argument("--images", type=int, default=50)
        p.add_argument("--out-dir", default=None,
                       help="artifact directory (enables reuse)")
        p.add_argument("--reuse-artifacts", action="store_true")
        if "budgets" in extra:
            p.add_argument("--budgets", required=True,
                           help="comma-separated ascending budgets")
        if "grids" in extra:
            p.add_argument("--q-values", required=True)
            p.add_argument("--beta-values", required=True)
        if "events" in extra:
            p.add_argument("--events", type=int, default=50)
        _add_attack_flags(p)
        _add_meta_flags(p)
        _add_common(p)
        p.set_defaults(func=fn)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        args = _apply_config_file(args)
        return args.func(args)
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"gpat: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"gpat: runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
