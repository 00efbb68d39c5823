"""Body-model ablation on the calibrated plant and on a hysteresis-free control plant.

    python3 scripts/ablation.py [--epochs 120] [--out runs/ablation]
"""
import argparse
import logging
import time
from pathlib import Path

from softctl.dataset import SweepPlan, build_splits
from softctl.hwbnn import DEFAULT_ARCHITECTURES, TrainConfig, ablation_compare, best_by_mode, write_ablation_csv
from softctl.plant import PlantParams, calibrate_hysteresis


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--epochs", type=int, default=120)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/ablation")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    base = PlantParams()
    for name, h in (("hysteresis", calibrate_hysteresis(base, 0.034)), ("control", 0.0)):
        t0 = time.perf_counter()
        splits = build_splits(PlantParams(hysteresis_halfwidth=h), SweepPlan(seed=args.seed), seed=args.seed)
        rows, _ = ablation_compare(splits, DEFAULT_ARCHITECTURES, TrainConfig(max_epochs=args.epochs, seed=args.seed))
        write_ablation_csv(rows, out / f"{name}.csv")
        best = best_by_mode(rows)
        ratio = best["6d"]["test_mse"] / best["3d"]["test_mse"]
        print(f"{name} (h = {h:.4f} kPa): best 6d {best['6d']['architecture']} {best['6d']['test_mse']:.5f}, "
              f"best 3d {best['3d']['architecture']} {best['3d']['test_mse']:.5f}, ratio {ratio:.4f}, "
              f"{time.perf_counter() - t0:.0f} s")


if __name__ == "__main__":
    main()
