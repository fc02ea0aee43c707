"""Train one sketch-conditioned policy and report its greedy success rate in unseen worlds.

    python3 scripts/behaviour_cloning.py model.ckpt --episodes 100
"""
import argparse
import logging

from ompn.harness import ExperimentConfig, build_dataset, evaluate_bc, train_seed


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("checkpoint")
    p.add_argument("--mode", choices=["full", "partial"], default="full")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--episodes", type=int, default=100)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s: %(message)s")
    cfg = ExperimentConfig(name="bc", mode=args.mode, supervision="sketch", seeds=[args.seed])
    train_set, _ = build_dataset(cfg)
    model = train_seed(cfg, args.seed, train_set)
    model.save(args.checkpoint)
    res = evaluate_bc(model, args.mode, sketch=True, episodes=args.episodes)
    print(f"success rate {res['success_rate']:.2f} over {args.episodes} worlds")


if __name__ == "__main__":
    main()
