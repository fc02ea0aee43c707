"""Train on Craft demonstrations and score task decomposition over several seeds.

    python3 scripts/run_segmentation.py runs/full --mode full
    python3 scripts/run_segmentation.py runs/partial --mode partial --seeds 0 1 2
"""
import argparse
import logging

from ompn.harness import ExperimentConfig, run_experiment


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("run_dir")
    p.add_argument("--mode", choices=["full", "partial"], default="full")
    p.add_argument("--supervision", choices=["nosketch", "sketch"], default="nosketch")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s: %(message)s")
    cfg = ExperimentConfig(name=f"craft-{args.mode}-{args.supervision}", mode=args.mode, supervision=args.supervision, seeds=args.seeds)
    res = run_experiment(cfg, args.run_dir)
    for r in res.seeds:
        print(f"seed {r.seed}: alignment {r.alignment:.3f}  f1 {r.f1:.3f}  ({r.wall_time:.0f}s)")
    s = res.summary()
    print(f"alignment {s['align_cell']}  f1 {s['f1_cell']}")
    for row in res.k_sweep():
        print(f"seed {row['seed']} K={row['k']}: precision {row['precision']:.3f} recall {row['recall']:.3f} f1 {row['f1']:.3f}")


if __name__ == "__main__":
    main()
