"""Scoring trained models: split reports, weekly series, maskout and map export."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from cmavit.dataset import BUCKET_NAMES, Dataset, FieldSample, ZoneThresholds, zone_labels
from cmavit.errors import CmavitError, UsageError
from cmavit.metrics import METRIC_NAMES, Metrics, bucket_metrics, compute_metrics
from cmavit.model import Model, ModelConfig
from cmavit.training import TrainConfig, TrainHistory, fit

log = logging.getLogger(__name__)

SPLIT_NAMES = ("train", "val", "test")
# (name, use_context, use_climate), in reporting order
MASKOUT_SCENARIOS = (
    ("full", True, True),
    ("mngm-maskout", False, True),
    ("climate-maskout", True, False),
    ("mngm-climate-maskout", False, False),
)


def fmt(x: float) -> str:
    """Shortest round-tripping text for a float (``nan`` for NaN)."""
    return repr(float(x))


def _truths(samples: Sequence[FieldSample]) -> np.ndarray:
    return np.stack([s.target for s in samples])


def _metrics_json(m: Metrics) -> dict:
    return {k: (float(v) if isinstance(v, float) else v) for k, v in m.as_dict().items()}


@dataclass
class EvalReport:
    """Metrics of final-week maps on one split, plus breakdowns.

    ``weekly`` holds one entry per prediction week (week 1 first); the
    overall and bucket numbers are pooled over pixels of the final week.
    """

    split: str
    overall: Metrics
    buckets: dict[str, Metrics]
    bucket_counts: dict[str, int]
    weekly: list[Metrics]
    per_block: dict[str, Metrics] = field(default_factory=dict)

    def to_json(self) -> str:
        doc = {
            "split": self.split,
            "overall": _metrics_json(self.overall),
            "buckets": {k: _metrics_json(v) for k, v in self.buckets.items()},
            "bucket_counts": self.bucket_counts,
            "weekly": [_metrics_json(m) for m in self.weekly],
            "per_block": {k: _metrics_json(v) for k, v in sorted(self.per_block.items())},
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    def weekly_csv(self) -> str:
        return weekly_csv(self.weekly)


def weekly_csv(series: Sequence[Metrics]) -> str:
    lines = ["week," + ",".join(METRIC_NAMES)]
    for t, m in enumerate(series, start=1):
        lines.append(f"{t}," + ",".join(fmt(getattr(m, k)) for k in METRIC_NAMES))
    return "\n".join(lines) + "\n"


def weekly_series(pred: np.ndarray, truth: np.ndarray) -> list[Metrics]:
    """Week-t predictions (N x T x H x W) against the harvest maps (N x H x W)."""
    return [compute_metrics(pred[:, t], truth, strict=False) for t in range(pred.shape[1])]


def evaluate(
    model: Model,
    samples: Sequence[FieldSample],
    split: str = "test",
    thresholds: ZoneThresholds = ZoneThresholds(),
) -> EvalReport:
    if not samples:
        raise UsageError(f"split {split!r} has no samples")
    pred = model.predict(samples)
    truth = _truths(samples)
    final = pred[:, -1]
    labels = zone_labels(truth, thresholds)
    counts = {name: int(np.sum(labels == lab)) for lab, name in BUCKET_NAMES.items()}
    blocks: dict[str, list[int]] = {}
    for i, s in enumerate(samples):
        blocks.setdefault(s.block_id, []).append(i)
    per_block = {b: compute_metrics(final[idx], truth[idx], strict=False) for b, idx in blocks.items()}
    buckets = bucket_metrics(final, truth, thresholds)
    return EvalReport(
        split=split,
        overall=buckets.pop("ALL"),
        buckets=buckets,
        bucket_counts=counts,
        weekly=weekly_series(pred, truth),
        per_block=per_block,
    )


def weekly_eval(model: Model, samples: Sequence[FieldSample]) -> list[Metrics]:
    """T-row metric series: week-t predictions against harvest truth."""
    if not samples:
        raise UsageError("no samples to evaluate")
    return weekly_series(model.predict(samples), _truths(samples))


# ---------------------------------------------------------------------------
# maskout
# ---------------------------------------------------------------------------

@dataclass
class MaskoutRow:
    scenario: str
    metrics: dict[str, Metrics] = field(default_factory=dict)
    history: TrainHistory | None = None
    model: Model | None = None
    error: str = ""


@dataclass
class MaskoutReport:
    rows: list[MaskoutRow]

    def row(self, scenario: str) -> MaskoutRow:
        for r in self.rows:
            if r.scenario == scenario:
                return r
        raise KeyError(scenario)

    def to_csv(self) -> str:
        """One row per scenario; metrics for train, val and test side by side."""
        cols = [f"{s}_{m}" for s in SPLIT_NAMES for m in METRIC_NAMES]
        lines = [",".join(["scenario", *cols, "error"])]
        for r in self.rows:
            vals = []
            for s in SPLIT_NAMES:
                m = r.metrics.get(s)
                vals += [fmt(getattr(m, k)) if m else "" for k in METRIC_NAMES]
            lines.append(",".join([r.scenario, *vals, r.error.replace(",", ";").replace("\n", " ")]))
        return "\n".join(lines) + "\n"


def run_maskout(
    dataset: Dataset,
    model_config: ModelConfig,
    train_config: TrainConfig,
    scenarios: Sequence[tuple[str, bool, bool]] = MASKOUT_SCENARIOS,
) -> MaskoutReport:
    """Retrain once per scenario with the shared seed and budget, then score all splits.

    A failing scenario keeps its row with the error text and no metrics.
    """
    splits = {s: dataset.split(s) for s in SPLIT_NAMES}
    rows = []
    for name, use_context, use_climate in scenarios:
        cfg = TrainConfig.from_dict({**train_config.to_dict(), "use_context": use_context, "use_climate": use_climate})
        row = MaskoutRow(name)
        try:
            model, history = fit(splits["train"], splits["val"], model_config, cfg)
            row.model, row.history = model, history
            for s, samples in splits.items():
                if samples:
                    row.metrics[s] = compute_metrics(model.predict(samples)[:, -1], _truths(samples), strict=False)
        except CmavitError as exc:
            log.warning("maskout scenario %s failed: %s", name, exc)
            row.error = f"{type(exc).__name__}: {exc}"
        rows.append(row)
    return MaskoutReport(rows)


# ---------------------------------------------------------------------------
# map export
# ---------------------------------------------------------------------------

def sample_stem(index: int, sample: FieldSample) -> str:
    return f"{index:05d}_{sample.block_id}_{sample.year}_c{sample.crop}"


def predict_export(model: Model, samples: Sequence[FieldSample], out_dir: str | Path) -> list[Path]:
    """Per sample, a long-format CSV of every week/pixel and a JSON of per-week metrics.

    CSV columns: week, row, col, pred_t_ha, truth_t_ha (week counts from 1).
    """
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    pred = model.predict(samples)
    written = []
    for i, s in enumerate(samples):
        p = pred[i]
        T, H, W = p.shape
        lines = ["week,row,col,pred_t_ha,truth_t_ha"]
        for t in range(T):
            for r in range(H):
                for c in range(W):
                    lines.append(f"{t + 1},{r},{c},{fmt(p[t, r, c])},{fmt(s.target[r, c])}")
        stem = sample_stem(i, s)
        csv_path = root / f"{stem}.csv"
        csv_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        summary = {
            "block_id": s.block_id,
            "year": s.year,
            "crop": s.crop,
            "weekly": [_metrics_json(m) for m in weekly_series(p[None], s.target[None])],
        }
        json_path = root / f"{stem}.json"
        json_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        written += [csv_path, json_path]
    return written
