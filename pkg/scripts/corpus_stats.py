"""Full-scale corpus statistics: where the running maxima of X and S stop growing."""
import argparse

import numpy as np

from graybox.datagen import GenConfig, generate_split, running_maxima
from graybox.dynamics import BioreactorConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3])
    ap.add_argument("--samples", type=int, default=1024)
    args = ap.parse_args()
    cfg = BioreactorConfig()
    for seed in args.seeds:
        test, rejected = generate_split(seed, "test", cfg, GenConfig(), size=args.samples)
        _, _, rx, rs = running_maxima(test)
        last_x = int(np.flatnonzero(np.diff(rx))[-1] + 1)
        last_s = int(np.flatnonzero(np.diff(rs))[-1] + 1)
        print(f"seed {seed}: last new max X at step {last_x}, S at step {last_s}, "
              f"rejected {rejected}")


if __name__ == "__main__":
    main()
