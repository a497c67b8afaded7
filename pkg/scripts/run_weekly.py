"""Train the full model once and print validation metrics for every week.

    python scripts/run_weekly.py --seed 1
"""

import argparse
import logging

from cmavit.dataset import GenConfig, build_dataset
from cmavit.evaluation import weekly_eval
from cmavit.model import ModelConfig
from cmavit.training import TrainConfig, fit_dataset


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=1, help="dataset seed")
    ap.add_argument("--train-seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=50)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    ds = build_dataset(args.seed, GenConfig())
    tc = TrainConfig.desk(seed=args.train_seed, max_epochs=args.epochs, early_stop_patience=min(15, args.epochs))
    model, hist = fit_dataset(
        ds, ModelConfig.desk(), tc, on_epoch=lambda r: print(f"epoch {r.epoch:3d}  val mse {r.val_loss:.3f}")
    )
    print(f"best epoch {hist.best_epoch}")
    print("week     r2    mape")
    for t, m in enumerate(weekly_eval(model, ds.split("val")), start=1):
        print(f"{t:4d} {m.r2:6.3f} {m.mape:7.2f}")


if __name__ == "__main__":
    main()
