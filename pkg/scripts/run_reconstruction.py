"""Step 1 on the default synthetic set, then decode d(h(y)) on held-out label maps.

    python3 scripts/run_reconstruction.py [--iters 3000] [--heldout 200] [--rerun]
"""

import argparse
import json
import logging

from labelenc.experiments import run_reconstruction


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--iters", type=int, default=3000)
    p.add_argument("--heldout", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rerun", action="store_true", help="ignore the cached result")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s: %(message)s")
    result = run_reconstruction(args.iters, args.heldout, args.seed, args.rerun)
    print(json.dumps(result, indent=2))


if __name__ == "__main__":
    main()
