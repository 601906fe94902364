"""Train on KeyDoorWorld until greedy success reaches a threshold, then sweep K.

    python3 scripts/train_keydoor.py [configs/keydoor_converge.yaml] [--threshold 0.9]
"""

import argparse
import json
import logging
from pathlib import Path

from dpepo.config import load_config
from dpepo.experiments import k_sweep, train_until
from dpepo.runner import save_checkpoint


def main() -> None:
    p = argparse.ArgumentParser()
    p.add_argument("config", nargs="?", default="configs/keydoor_converge.yaml")
    p.add_argument("--threshold", type=float, default=0.9)
    p.add_argument("--episodes", type=int, default=37, help="episodes per task in the K sweep")
    p.add_argument("--greedy-sweep", action="store_true")
    args = p.parse_args()
    logging.basicConfig(level=logging.ERROR)

    cfg = load_config(args.config)
    res = train_until(cfg, args.threshold, echo=print)
    print(f"reached={res.reached} iterations={res.iterations} seconds={res.seconds:.1f} "
          f"greedy_success={res.greedy_success:.3f}")
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "checkpoint.json", res.params, cfg, res.iterations)

    rows, gaps = k_sweep(cfg, res.params, episodes_per_task=args.episodes, greedy=args.greedy_sweep)
    for row in rows:
        r = row.report
        print(f"K={row.k}  success {r.successes}/{r.episodes} = {r.success_rate:.3f}  "
              f"95% CI [{r.ci_low:.3f}, {r.ci_high:.3f}]")
    for g in gaps:
        print(f"K={g.larger} vs K={g.smaller}: {g.verdict}")
    summary = {"convergence": {"reached": res.reached, "iterations": res.iterations, "seconds": res.seconds,
                               "history": res.history},
               "k_sweep": [row.report.to_dict() for row in rows],
               "gaps": [vars(g) for g in gaps]}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


if __name__ == "__main__":
    main()
