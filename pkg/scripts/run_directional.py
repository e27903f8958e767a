"""Cross-mode directional comparison over several seeds.

Usage: python3 scripts/run_directional.py --seeds 0 1 2 [--config FILE] [--out results.json]
"""

import argparse
import dataclasses
import json
import logging
import sys

from ensgan.config import TrainConfig, config_parse
from ensgan.experiments import median_directional, run_directional


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--config")
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--out")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    base = config_parse(args.config) if args.config else TrainConfig()
    if args.epochs is not None:
        base = base.replace(epochs=args.epochs)
    results = []
    for seed in args.seeds:
        r = run_directional(base.replace(seed=seed))
        row = {k: v for k, v in dataclasses.asdict(r).items() if k != "report"}
        print(json.dumps(row), flush=True)
        results.append(r)
    med = median_directional(results)
    print(json.dumps({"median": med}, indent=1))
    if args.out:
        with open(args.out, "w") as fh:
            json.dump({"runs": [{k: v for k, v in dataclasses.asdict(r).items() if k != "report"}
                                for r in results], "median": med}, fh, indent=1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
