"""Write expansion and threshold SVGs for the first few held-out traces of a run.

    python3 scripts/plot_traces.py runs/full/seed0/traces.jsonl figures/ --count 5
"""
import argparse
import json
from pathlib import Path

import numpy as np

from ompn.plots import expansion_svg, threshold_svg
from ompn.segmentation import DegenerateSignalError, auto_threshold, boundary_signal, standardize, threshold_boundaries


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("traces")
    p.add_argument("out_dir")
    p.add_argument("--count", type=int, default=5)
    args = p.parse_args()
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, line in enumerate(Path(args.traces).read_text().splitlines()[: args.count]):
        rec = json.loads(line)
        title = f"{rec['task']} world {rec['seed']}"
        (out / f"expansion_{i}.svg").write_text(expansion_svg(np.array(rec["pi"]), rec["actions"], rec["gt"], rec["pred"], title))
        std = standardize(boundary_signal(rec["pi_avg"], len(rec["actions"]) - 1))
        try:
            upper, lower, final = auto_threshold(std)
        except DegenerateSignalError:
            upper = lower = final = 0.5
        preds, _ = threshold_boundaries(std, len(rec["gt"]), final)
        (out / f"threshold_{i}.svg").write_text(threshold_svg(std, upper, lower, final, rec["gt"], preds, title))
    print(f"wrote {2 * min(args.count, i + 1)} files to {out}")


if __name__ == "__main__":
    main()
