"""Attack a held-out classifier with and without the meta attacker.

Builds a small testbed (synthetic data, two source classifiers, one
held-out target, briefly meta-trained attacker), then reports per-image
query spend for the gradient-predicting attack against the pure
finite-difference baseline. A couple of minutes on a laptop CPU.

    python3 demos/attack_comparison.py
"""

import dataclasses

import numpy as np

from gpat.attack import AttackConfig
from gpat.harness import ExperimentConfig, build_testbed, run_suite
from gpat.metatrain import MetaConfig


def main():
    config = ExperimentConfig(
        classes=3, dataset_n=400, source_ids=(0, 1), target_id=2,
        attack=AttackConfig(m=5, q=16, beta=0.5, budget=1500, max_iters=1500),
        meta=MetaConfig(inner_lr=0.1, inner_steps=3, outer_epsilon=0.5,
                        k_samples=16, outer_iters=60, seed=0),
        image_count=8, pairs_per_task=60, seed=0)

    print("== building testbed (data, classifiers, meta attacker) ==")
    bed = build_testbed(config, need_attacker=True)
    print(f"target model {config.target_id} held out of meta-training; "
          f"{len(bed.eligible)} correctly classified test images selected")

    report = run_suite(config, methods=("meta", "fd_baseline"), testbed=bed)

    print("\n== per-image query spend (budget "
          f"{config.attack.budget}) ==")
    print(f"{'image':>6} {'label':>6}   {'meta':>14} {'fd baseline':>14}")
    meta_rows = report.methods["meta"]["rows"]
    fd_rows = report.methods["fd_baseline"]["rows"]
    for mr, fr in zip(meta_rows, fd_rows):
        def cell(row):
            return (f"{row['queries']:5d} q" if row["success"]
                    else f"{'fail':>7}")
        print(f"{mr['image_index']:>6} {mr['true_class']:>6}   "
              f"{cell(mr):>14} {cell(fr):>14}")

    print("\n== aggregates ==")
    for name in ("meta", "fd_baseline"):
        agg = report.methods[name]["aggregates"]
        mq = (f"{agg['mean_queries']:.1f}" if agg["mean_queries"] is not None
              else "-")
        ml = f"{agg['mean_l2']:.3f}" if agg["mean_l2"] is not None else "-"
        print(f"{name:12s} success {agg['success_rate']:.2f}  "
              f"mean queries {mq:>8}  mean L2 {ml}")

    t_cfg = dataclasses.replace(config.attack, mode="targeted",
                                target_class="next")
    t_rep = run_suite(dataclasses.replace(config, attack=t_cfg),
                      methods=("meta",), testbed=bed)
    agg = t_rep.methods["meta"]["aggregates"]
    print(f"\ntargeted (next class rule): success {agg['success_rate']:.2f}, "
          f"mean queries "
          f"{agg['mean_queries']:.1f}" if agg["mean_queries"] is not None
          else "\ntargeted (next class rule): no successes")


if __name__ == "__main__":
    main()
