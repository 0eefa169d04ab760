"""Train the toy model for one lambda and report training progress.

    python scripts/train_toy.py --lambda 1 --out artifacts/toy
"""
import argparse
import json
import logging

from pcgc.sweep import ToyRun, progress, train_lambda


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--lambda", dest="lam", type=float, default=1.0)
    ap.add_argument("--steps", type=int, default=ToyRun.steps)
    ap.add_argument("--seed", type=int, default=ToyRun.seed)
    ap.add_argument("--out", default="artifacts/toy")
    ap.add_argument("--retrain", action="store_true", help="ignore a cached model")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    run = ToyRun(steps=args.steps, seed=args.seed)
    model, manifest = train_lambda(args.lam, run, args.out, retrain=args.retrain)
    report = progress(model, run, args.lam)
    print(json.dumps({"seconds": manifest["seconds"], "model_hash": manifest["model_hash"], **report}, indent=1))


if __name__ == "__main__":
    main()
