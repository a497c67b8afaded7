import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cmavit.core import Tensor
from cmavit.dataset import GenConfig, ZoneMap, ZoneThresholds, build_dataset, classify_yield_zones
from cmavit.errors import ConfigError, DimensionError, NumericError, ParameterError, UsageError
from cmavit.model import ModelConfig, init_params
from cmavit.rng import make_rng
from cmavit.training import (
    EpochRecord,
    TrainConfig,
    TrainHistory,
    _epoch_batches,
    apply_yieldzone,
    draw_indices,
    fit,
    mse_loss,
    sample_batch,
    train,
)

CFG = ModelConfig.tiny()


@pytest.fixture(scope="module")
def data():
    ds = build_dataset(3, GenConfig(n_cultivars=2, blocks_per_cultivar=3, years=(2016,), T=3))
    return ds.split("train"), ds.split("val")


def quick(**kw):
    return TrainConfig(**{**dict(lr=1e-3, max_epochs=3, early_stop_patience=3, batch_size=4), **kw})


# -- config ------------------------------------------------------------------------

@pytest.mark.parametrize(
    "kw",
    [dict(strategy="focal"), dict(batch_size=0), dict(max_epochs=0), dict(max_epochs=5, early_stop_patience=6), dict(lr=-1.0)],
)
def test_config_rejects_invalid(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw)


def test_config_round_trip_and_flags():
    c = TrainConfig(strategy="yieldzone+csr")
    assert TrainConfig.from_dict(c.to_dict()) == c
    assert c.uses_csr and c.uses_yieldzone
    assert not TrainConfig().uses_csr
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"momentum": 0.9})


def test_published_defaults_kept():
    c = TrainConfig()
    assert (c.lr, c.beta1, c.beta2, c.weight_decay) == (1e-4, 0.98, 0.95, 0.01)


# -- loss ------------------------------------------------------------------------------

def test_mse_broadcasts_over_weeks():
    pred = Tensor(np.arange(2 * 3 * 2 * 2, dtype=float).reshape(2, 3, 2, 2), requires_grad=True)
    tgt = np.ones((2, 2, 2))
    loss = mse_loss(pred, tgt)
    ref = np.mean((pred.data - tgt[:, None]) ** 2)
    assert loss.item() == pytest.approx(ref, rel=1e-15)
    loss.backward()
    np.testing.assert_allclose(pred.grad, 2 * (pred.data - tgt[:, None]) / pred.size, rtol=1e-14)


def test_mse_same_shape_and_mismatch():
    p = Tensor(np.zeros((2, 3)))
    assert mse_loss(p, np.ones((2, 3))).item() == 1.0
    with pytest.raises(DimensionError):
        mse_loss(Tensor(np.zeros((1, 3, 2, 2))), np.zeros((1, 3, 3)))


# -- sampling ---------------------------------------------------------------------------

def test_draw_indices_uniform_and_weighted():
    rng = make_rng(0, "t")
    idx = draw_indices(5, None, 1000, rng)
    assert idx.min() >= 0 and idx.max() < 5
    w = np.array([0.0, 0.0, 1.0])
    np.testing.assert_array_equal(draw_indices(3, w, 50, rng), 2)


def test_draw_indices_errors():
    rng = make_rng(0, "t")
    with pytest.raises(UsageError):
        draw_indices(0, None, 3, rng)
    with pytest.raises(DimensionError):
        draw_indices(3, np.ones(2) / 2, 3, rng)
    with pytest.raises(ParameterError):
        draw_indices(2, np.array([0.7, 0.7]), 3, rng)


def test_sample_batch_deterministic_with_replacement():
    items = list("abc")
    a = sample_batch(items, None, 10, make_rng(1, "s"))
    b = sample_batch(items, None, 10, make_rng(1, "s"))
    assert a == b and len(a) == 10


# -- yield zones --------------------------------------------------------------------------

def test_apply_yieldzone_multiplies_every_channel_and_week(data):
    s = data[0][0]
    zm = classify_yield_zones(s.target)
    out = apply_yieldzone(s, zm)
    np.testing.assert_array_equal(out.image, s.image * zm.labels[None, None])
    np.testing.assert_array_equal(out.target, s.target)


def test_apply_yieldzone_all_ones_is_identity(data):
    s = data[0][0]
    zm = classify_yield_zones(s.target, ZoneThresholds(-1.0, 1e9))
    assert np.all(zm.labels == 2)
    ones = ZoneMap(np.ones_like(zm.labels), zm.thresholds)
    assert apply_yieldzone(s, ones).image.tobytes() == s.image.tobytes()


def test_apply_yieldzone_shape_check(data):
    s = data[0][0]
    with pytest.raises(DimensionError):
        apply_yieldzone(s, ZoneMap(np.ones((3, 3), dtype=int), ZoneThresholds()))


# -- training loop --------------------------------------------------------------------------

def test_training_is_deterministic(data):
    tr, va = data
    runs = [fit(tr, va, CFG, quick(seed=4))[1].to_csv() for _ in range(2)]
    assert runs[0] == runs[1]


def test_different_seeds_differ(data):
    tr, va = data
    assert fit(tr, va, CFG, quick(seed=1))[1].to_csv() != fit(tr, va, CFG, quick(seed=2))[1].to_csv()


def test_patience_zero_runs_one_epoch(data):
    _, hist = fit(*data, CFG, quick(max_epochs=5, early_stop_patience=0))
    assert len(hist.records) == 1 and hist.best_epoch == 1


def test_early_stopping_and_best_restore(data):
    tr, va = data
    model, hist = fit(tr, va, CFG, quick(lr=0.05, max_epochs=8, early_stop_patience=2))
    best = hist.records[hist.best_epoch - 1].val_loss
    assert best == min(r.val_loss for r in hist.records)
    assert len(hist.records) <= hist.best_epoch + 2
    pred = model.predict(va)
    truth = np.stack([s.target for s in va])
    assert np.mean((pred - truth[:, None]) ** 2) == pytest.approx(best, rel=1e-10)


def test_loss_decreases(data):
    tr, va = data
    _, hist = fit(tr, va, CFG, quick(max_epochs=10, early_stop_patience=10))
    assert hist.records[-1].train_loss < hist.records[0].train_loss


@pytest.mark.parametrize("strategy", ["csr", "yieldzone", "yieldzone+csr"])
def test_strategies_run(data, strategy):
    _, hist = fit(*data, CFG, quick(strategy=strategy, max_epochs=2, early_stop_patience=2))
    assert all(math.isfinite(r.train_loss) for r in hist.records)


def test_nan_parameter_raises_numeric_error(data):
    tr, va = data
    params = init_params(CFG, 0)
    params["head/b"].data[0] = np.nan
    with pytest.raises(NumericError, match="epoch 1, batch 0"):
        train(params, tr, va, CFG, quick())


def test_empty_split_rejected(data):
    with pytest.raises(UsageError):
        fit(data[0], [], CFG, quick())


def test_history_csv_format():
    h = TrainHistory([EpochRecord(1, 0.5, 0.25, 10.0)], best_epoch=1)
    assert h.to_csv() == "epoch,train_loss,val_loss,val_mape\n1,0.5,0.25,10.0\n"


@given(st.integers(1, 20), st.integers(1, 7))
@settings(max_examples=20, deadline=None)
def test_epoch_covers_every_sample_once(n, batch):
    parts = _epoch_batches(n, TrainConfig(batch_size=batch), None, make_rng(0, "e"))
    np.testing.assert_array_equal(np.sort(np.concatenate(parts)), np.arange(n))
    assert all(len(p) <= batch for p in parts)
