"""Loss, batch sampling, YieldZone conditioning and the training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from cmavit.core import AdamWState, Tensor, adamw_step, clip_grad_norm, no_grad, zero_grads
from cmavit.dataset import (
    Dataset,
    FieldSample,
    NormStats,
    ZoneMap,
    ZoneThresholds,
    classify_yield_zones,
    csr_weights,
)
from cmavit.errors import ConfigError, DimensionError, NumericError, ParameterError, UsageError
from cmavit.metrics import compute_metrics
from cmavit.model import Model, ModelConfig, forward, init_params, make_batch
from cmavit.nn import Params
from cmavit.rng import make_rng

log = logging.getLogger(__name__)

STRATEGIES = ("plain", "csr", "yieldzone", "yieldzone+csr")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.98
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.01
    max_epochs: int = 300
    early_stop_patience: int = 50
    batch_size: int = 16
    seed: int = 0
    strategy: str = "plain"
    use_climate: bool = True
    use_context: bool = True
    grad_clip: float = 1.0
    zone_low: float = 22.0
    zone_high: float = 54.0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be at least 1")
        if not 0 <= self.early_stop_patience <= self.max_epochs:
            raise ConfigError("early_stop_patience must lie in [0, max_epochs]")
        if self.lr < 0:
            raise ConfigError("lr must be non-negative")

    @classmethod
    def desk(cls, **kw) -> "TrainConfig":
        """Budget that fits the desk model on default synthetic data in a few minutes."""
        base = dict(lr=1e-3, max_epochs=50, early_stop_patience=15)
        base.update(kw)
        return cls(**base)

    @property
    def uses_csr(self) -> bool:
        return self.strategy in ("csr", "yieldzone+csr")

    @property
    def uses_yieldzone(self) -> bool:
        return self.strategy in ("yieldzone", "yieldzone+csr")

    @property
    def zones(self) -> ZoneThresholds:
        return ZoneThresholds(self.zone_low, self.zone_high)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown training settings: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_mape: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    seed: int = 0

    @property
    def best_val_loss(self) -> float:
        return self.records[self.best_epoch - 1].val_loss if self.best_epoch > 0 else math.inf

    def to_csv(self) -> str:
        lines = ["epoch,train_loss,val_loss,val_mape"]
        for r in self.records:
            lines.append(f"{r.epoch},{r.train_loss!r},{r.val_loss!r},{r.val_mape!r}")
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# loss and sampling
# ---------------------------------------------------------------------------

def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean squared error over every week, pixel (and sample).

    ``target`` is either pred-shaped or lacks the week axis (third from the
    end), in which case it is broadcast across weeks.
    """
    target = np.asarray(target, dtype=float)
    if target.shape != pred.shape:
        if pred.ndim < 3 or target.shape != pred.shape[:-3] + pred.shape[-2:]:
            raise DimensionError(f"target {target.shape} does not match prediction {pred.shape}")
        target = np.expand_dims(target, -3)
    diff = pred - Tensor(target)
    return (diff * diff).mean()


def draw_indices(n: int, weights: np.ndarray | None, k: int, rng: np.random.Generator) -> np.ndarray:
    if n < 1:
        raise UsageError("cannot sample from an empty set")
    if weights is None:
        return rng.integers(0, n, size=k)
    weights = np.asarray(weights, dtype=float)
    if weights.shape != (n,):
        raise DimensionError(f"{weights.size} weights for {n} samples")
    if abs(weights.sum() - 1.0) > 1e-9 or np.any(weights < 0):
        raise ParameterError("sampling weights must be non-negative and sum to 1")
    return rng.choice(n, size=k, replace=True, p=weights)


def sample_batch(samples: Sequence, weights, batch_size: int, rng: np.random.Generator) -> list:
    """i.i.d. draws with replacement, uniform when ``weights`` is None."""
    return [samples[i] for i in draw_indices(len(samples), weights, batch_size, rng)]


def apply_yieldzone(sample: FieldSample, zone_map: ZoneMap) -> FieldSample:
    """Multiply every channel and week of the image by the zone labels (1/2/3).

    Training-time only; inference always sees the raw image.
    """
    labels = np.asarray(zone_map.labels)
    if labels.shape != sample.image.shape[2:]:
        raise DimensionError(f"zone map {labels.shape} does not match image {sample.image.shape[2:]}")
    return replace(sample, image=sample.image * labels.astype(float)[None, None])


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def _epoch_batches(n: int, config: TrainConfig, weights, rng) -> list[np.ndarray]:
    if config.uses_csr:
        order = draw_indices(n, weights, n, rng)
    else:
        order = rng.permutation(n)
    return [order[i : i + config.batch_size] for i in range(0, n, config.batch_size)]


def _first_bad_grad(params: Params) -> str | None:
    for name, p in params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            return name
    return None


def evaluate_loss(
    params: Params,
    samples: Sequence[FieldSample],
    norm: NormStats,
    model_config: ModelConfig,
    batch_size: int = 32,
) -> tuple[float, float]:
    """(MSE in (t/ha)^2, MAPE %) over every weekly map, inference mode."""
    sq = 0.0
    count = 0
    preds, truths = [], []
    with no_grad():
        for i in range(0, len(samples), batch_size):
            batch = make_batch(samples[i : i + batch_size], norm, model_config)
            pred = forward(batch, params, model_config).data * norm.target_std + norm.target_mean
            truth = np.broadcast_to(batch.targets[:, None], pred.shape)
            sq += float(np.sum((pred - truth) ** 2))
            count += pred.size
            preds.append(pred.reshape(-1))
            truths.append(truth.reshape(-1))
    mape = compute_metrics(np.concatenate(preds), np.concatenate(truths), strict=False).mape
    return sq / count, mape


def train(
    params: Params,
    train_samples: Sequence[FieldSample],
    val_samples: Sequence[FieldSample],
    model_config: ModelConfig,
    config: TrainConfig,
    norm: NormStats | None = None,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> tuple[Params, TrainHistory]:
    """AdamW on weekly-map MSE with early stopping on validation MSE.

    ``params`` are updated in place and finally reset to the best epoch.
    """
    if not train_samples or not val_samples:
        raise UsageError("training needs non-empty train and val splits")
    norm = NormStats.fit(train_samples) if norm is None else norm
    mcfg = replace(model_config, use_climate=config.use_climate, use_context=config.use_context)
    weights = csr_weights(train_samples, config.zones) if config.uses_csr else None
    zone_maps = (
        [classify_yield_zones(s.target, config.zones) for s in train_samples] if config.uses_yieldzone else None
    )
    state = AdamWState()
    history = TrainHistory(seed=config.seed)
    best: dict[str, np.ndarray] | None = None
    stale = 0
    scale2 = norm.target_std**2
    for epoch in range(1, config.max_epochs + 1):
        order_rng = make_rng(config.seed, "epoch", epoch)
        drop_rng = make_rng(config.seed, "dropout", epoch)
        losses = []
        for bi, idx in enumerate(_epoch_batches(len(train_samples), config, weights, order_rng)):
            chosen = [train_samples[i] for i in idx]
            images = None
            if zone_maps is not None:
                images = [apply_yieldzone(train_samples[i], zone_maps[i]).image for i in idx]
            batch = make_batch(chosen, norm, mcfg, images)
            pred = forward(batch, params, mcfg, drop_rng, training=True)
            loss = mse_loss(pred, (batch.targets - norm.target_mean) / norm.target_std)
            zero_grads(params.values())
            loss.backward()
            lval = loss.item()
            bad = _first_bad_grad(params)
            if not math.isfinite(lval) or bad is not None:
                raise NumericError(
                    f"non-finite training state at epoch {epoch}, batch {bi}: loss={lval}, first bad grad={bad}"
                )
            clip_grad_norm(list(params.values()), config.grad_clip)
            adamw_step(
                params,
                state,
                lr=config.lr,
                beta1=config.beta1,
                beta2=config.beta2,
                eps=config.eps,
                weight_decay=config.weight_decay,
            )
            losses.append(lval)
        val_loss, val_mape = evaluate_loss(params, val_samples, norm, mcfg)
        if not math.isfinite(val_loss):
            raise NumericError(f"validation loss is not finite at epoch {epoch}")
        rec = EpochRecord(epoch, float(np.mean(losses)) * scale2, val_loss, val_mape)
        history.records.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
        if val_loss < history.best_val_loss:
            history.best_epoch = epoch
            best = {k: p.data.copy() for k, p in params.items()}
            stale = 0
        else:
            stale += 1
        if stale >= config.early_stop_patience:
            break
    for k, p in params.items():
        p.data = best[k]
    return params, history


def fit(
    train_samples: Sequence[FieldSample],
    val_samples: Sequence[FieldSample],
    model_config: ModelConfig,
    config: TrainConfig,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> tuple[Model, TrainHistory]:
    """Initialise from ``config.seed``, fit normalisation on train, then train."""
    norm = NormStats.fit(train_samples)
    mcfg = replace(model_config, use_climate=config.use_climate, use_context=config.use_context)
    params = init_params(mcfg, config.seed)
    params, history = train(params, train_samples, val_samples, mcfg, config, norm, on_epoch)
    meta = {"train": config.to_dict(), "best_epoch": history.best_epoch}
    return Model(mcfg, params, norm, meta), history


def fit_dataset(dataset: Dataset, model_config: ModelConfig, config: TrainConfig, on_epoch=None):
    return fit(dataset.split("train"), dataset.split("val"), model_config, config, on_epoch)
