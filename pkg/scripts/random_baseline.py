"""Success of the untrained uniform policy at each K, the floor the trained policy is measured against.

    python3 scripts/random_baseline.py [configs/keydoor_converge.yaml] --episodes 200
"""

import argparse
import logging

from dpepo.config import load_config
from dpepo.experiments import k_sweep
from dpepo.runner import initial_params


def main() -> None:
    p = argparse.ArgumentParser()
    p.add_argument("config", nargs="?", default="configs/keydoor_converge.yaml")
    p.add_argument("--episodes", type=int, default=200, help="episodes per task")
    args = p.parse_args()
    logging.basicConfig(level=logging.ERROR)
    cfg = load_config(args.config)
    rows, _ = k_sweep(cfg, initial_params(cfg), episodes_per_task=args.episodes)
    for row in rows:
        r = row.report
        print(f"K={row.k}  random success {r.success_rate:.4f}  95% CI [{r.ci_low:.4f}, {r.ci_high:.4f}]")


if __name__ == "__main__":
    main()
