"""Seed sweep over baseline (1x, 2x), Step1-only, and the Step-2 toggle ablations.

    python3 scripts/run_directional.py [--iters 3000] [--seeds 0 1 2] [--with-recon-only] [--rerun]
"""

import argparse
import json
import logging

from labelenc.experiments import run_directional


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--iters", type=int, default=3000)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--with-recon-only", action="store_true", help="add the Step-1 reconstruction-only arm")
    p.add_argument("--rerun", action="store_true", help="ignore the cached result")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s: %(message)s")
    r = run_directional(args.iters, tuple(args.seeds), args.with_recon_only, args.rerun)
    print(json.dumps(r, indent=2))
    print("\nmean mmAP x100")
    for arm, v in r["mean"].items():
        print(f"  {arm:18s} {100 * v:6.2f}")


if __name__ == "__main__":
    main()
