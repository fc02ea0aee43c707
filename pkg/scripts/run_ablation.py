"""Alignment accuracy of every model variant on shared seeds (writes ablation.csv).

    python3 scripts/run_ablation.py runs/ablation --seeds 0 1 2
"""
import argparse
import logging

from ompn.harness import ExperimentConfig, ablation_suite
from ompn.model import VARIANTS


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("run_dir")
    p.add_argument("--mode", choices=["full", "partial"], default="full")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--variants", nargs="+", choices=VARIANTS, default=list(VARIANTS))
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s: %(message)s")
    cfg = ExperimentConfig(name=f"ablation-{args.mode}", mode=args.mode, seeds=args.seeds)
    for row in ablation_suite(cfg, args.run_dir, args.variants):
        print(f"{row['variant']:>20}: {row['mean']:.3f} ({row['std']:.3f})")


if __name__ == "__main__":
    main()
