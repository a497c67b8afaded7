"""Regression metrics and yield-range buckets."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from cmavit.dataset import BUCKET_NAMES, ZoneThresholds, zone_labels
from cmavit.errors import DimensionError, UndefinedMetricError

MAPE_EPS = 1e-6
METRIC_NAMES = ("r2", "mae", "rmse", "mape")


@dataclass(frozen=True)
class Metrics:
    r2: float
    mae: float
    rmse: float
    mape: float
    n: int
    n_mape_excluded: int = 0

    def as_dict(self) -> dict:
        return asdict(self)


def compute_metrics(pred, truth, *, eps: float = MAPE_EPS, strict: bool = True) -> Metrics:
    """R², MAE, RMSE and MAPE (%) over flattened arrays.

    Truth values with |y| < ``eps`` are left out of MAPE and counted in
    ``n_mape_excluded``. With ``strict`` an undefined R² (fewer than two
    points, or constant truth) raises; otherwise it is reported as NaN.
    """
    p = np.asarray(pred, dtype=float).reshape(-1)
    y = np.asarray(truth, dtype=float).reshape(-1)
    if p.shape != y.shape:
        raise DimensionError(f"prediction has {p.size} values, truth has {y.size}")
    n = y.size
    if n == 0:
        raise UndefinedMetricError("no values to score")
    e = p - y
    mae = float(np.mean(np.abs(e)))
    rmse = math.sqrt(float(np.mean(e * e)))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if n < 2 or ss_tot == 0.0:
        if strict:
            raise UndefinedMetricError("R² is undefined for fewer than two points or constant truth")
        r2 = math.nan
    else:
        r2 = 1.0 - float(np.sum(e * e)) / ss_tot
    keep = np.abs(y) >= eps
    mape = 100.0 * float(np.mean(np.abs(e[keep] / y[keep]))) if keep.any() else math.nan
    return Metrics(r2, mae, rmse, mape, n, int(n - keep.sum()))


def bucket_metrics(pred, truth, thresholds: ZoneThresholds = ZoneThresholds()) -> dict[str, Metrics]:
    """Metrics for ALL plus each populated range bucket (LER/CR/HER).

    Pixels are bucketed by their true value; empty buckets are omitted.
    """
    p = np.asarray(pred, dtype=float).reshape(-1)
    y = np.asarray(truth, dtype=float).reshape(-1)
    out = {"ALL": compute_metrics(p, y, strict=False)}
    labels = zone_labels(y, thresholds)
    for label, name in BUCKET_NAMES.items():
        sel = labels == label
        if sel.any():
            out[name] = compute_metrics(p[sel], y[sel], strict=False)
    return out
