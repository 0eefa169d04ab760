"""Train (or reuse) one toy model per lambda and write the held-out RD table.

    python scripts/rd_sweep.py --out artifacts/toy --csv artifacts/toy/rd.csv
"""
import argparse
import logging

from pcgc.metrics import write_rd_csv
from pcgc.sweep import SWEEP_LAMBDAS, ToyRun, heldout_set, rd_point, train_lambda


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="artifacts/toy")
    ap.add_argument("--csv", default=None)
    ap.add_argument("--lambdas", default=",".join(f"{v:g}" for v in SWEEP_LAMBDAS))
    ap.add_argument("--retrain", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    run = ToyRun()
    clouds = heldout_set(run)
    points = []
    print("lambda  bpp     feat_bpp  coord_bpp  D1_PSNR  D2_PSNR")
    for lam in (float(v) for v in args.lambdas.split(",")):
        model, _ = train_lambda(lam, run, args.out, retrain=args.retrain)
        point, extra = rd_point(model, clouds, run.bitdepth, label=f"lambda={lam:g}")
        points.append(point)
        print(f"{lam:<7g} {point.bpp:.4f}  {extra['feature_bpp']:.4f}    {extra['coord_bpp']:.4f}     "
              f"{point.d1_psnr:.3f}   {point.d2_psnr:.3f}")
    if args.csv:
        write_rd_csv(points, args.csv)


if __name__ == "__main__":
    main()
