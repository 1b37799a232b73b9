"""Teacher vs. no-KD student vs. distilled student on synthetic data, over several seeds.

    python3 scripts/run_distillation.py --seeds 0 1 2 3 4 --epochs 30
"""

import argparse
import json
import logging

import numpy as np

from modal_distill.distill import METHODS
from modal_distill.experiment import run_distillation_experiment


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--noise", type=float, default=1.0, help="audio/language noise; video gets twice this")
    p.add_argument("--config", type=int, default=5)
    p.add_argument("--method", choices=[m for m in METHODS if m != "none"], default="edam_s_down")
    p.add_argument("-v", "--verbose", action="store_true")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")

    res = run_distillation_experiment(
        seeds=args.seeds, epochs=args.epochs, n=args.n, noise=args.noise, config=args.config, method=args.method
    )
    summary = {
        arm: {
            "accuracy": res.accuracy[arm],
            "mean_accuracy": float(np.mean(res.accuracy[arm])),
            "mean_f1": float(np.mean(res.f1[arm])),
        }
        for arm in res.accuracy
    }
    print(json.dumps({"method": args.method, "config": args.config, "seconds": res.seconds, "arms": summary}, indent=2))


if __name__ == "__main__":
    main()
