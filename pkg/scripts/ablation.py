"""Full diversity rewards against both switched off, over several seeds.

    python3 scripts/ablation.py [configs/keydoor_converge.yaml] --iterations 150 --seeds 0 1 2
"""

import argparse
import json
import logging
from dataclasses import replace

from dpepo.config import load_config
from dpepo.experiments import ablation


def main() -> None:
    p = argparse.ArgumentParser()
    p.add_argument("config", nargs="?", default="configs/keydoor_converge.yaml")
    p.add_argument("--iterations", type=int, default=150)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--out", help="write per-seed results as JSON")
    args = p.parse_args()
    logging.basicConfig(level=logging.ERROR)

    cfg = replace(load_config(args.config), iterations=args.iterations).validate()
    rows = ablation(cfg, args.seeds, echo=print)
    repeats = sum(r.repeats_higher_when_ablated for r in rows)
    diversity = sum(r.diversity_lower_when_ablated for r in rows)
    print(f"ablated repeats higher in {repeats}/{len(rows)} seeds; ablated diversity lower in {diversity}/{len(rows)}")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump([r.to_dict() for r in rows], fh, indent=2)


if __name__ == "__main__":
    main()
