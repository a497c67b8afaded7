"""Sanity check: the tiny model memorises eight crops in a few seconds.

    python scripts/run_overfit.py
"""

import time

import numpy as np

from cmavit.dataset import GenConfig, generate_blocks
from cmavit.metrics import compute_metrics
from cmavit.model import ModelConfig
from cmavit.training import TrainConfig, fit


def main() -> None:
    crops = generate_blocks(0, GenConfig(n_cultivars=2, blocks_per_cultivar=1, years=(2016,), T=3))
    tc = TrainConfig(lr=1e-2, max_epochs=500, early_stop_patience=500, batch_size=8, weight_decay=0.0)
    start = time.perf_counter()
    model, hist = fit(crops, crops, ModelConfig.tiny(), tc)
    truth = np.stack([s.target for s in crops])
    m = compute_metrics(model.predict(crops)[:, -1], truth)
    for r in hist.records[::50]:
        print(f"epoch {r.epoch:3d}  train mse {r.train_loss:.4f}")
    print(f"final-week train MAPE {m.mape:.2f}%  R2 {m.r2:.4f}  ({time.perf_counter() - start:.1f} s)")


if __name__ == "__main__":
    main()
