import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cmavit.dataset import (
    CHANNELS,
    CR,
    DOY_CHANNEL,
    HER,
    LER,
    FieldSample,
    GenConfig,
    NormStats,
    ZoneThresholds,
    build_dataset,
    classify_yield_zones,
    csr_weights,
    encode_doy,
    generate_blocks,
    generate_fields,
    load_dataset,
    make_patches,
    observation_days,
    save_dataset,
    split_bho,
)
from cmavit.errors import DataError, ParameterError

SMALL = GenConfig(n_cultivars=3, blocks_per_cultivar=3, years=(2016, 2017))


@pytest.fixture(scope="module")
def small_samples():
    return generate_blocks(1, SMALL)


# -- DOY ------------------------------------------------------------------------

def test_encode_doy_examples():
    assert abs(encode_doy(365)) < 1e-12
    assert encode_doy(91) == pytest.approx(math.sin(2 * math.pi * 91 / 365), abs=1e-15)
    assert encode_doy(274) == pytest.approx(math.sin(2 * math.pi * 274 / 365), abs=1e-15)
    # the commonly quoted five-digit values agree to 1e-4
    assert encode_doy(91) == pytest.approx(0.99997, abs=1e-4)
    assert encode_doy(274) == pytest.approx(-0.99990, abs=1e-4)


@pytest.mark.parametrize("day", [0, 366, -5])
def test_encode_doy_rejects_out_of_range(day):
    with pytest.raises(ParameterError):
        encode_doy(day)


@given(st.integers(1, 365))
def test_encode_doy_bounded(day):
    assert -1.0 <= encode_doy(day) <= 1.0


def test_observation_days_span_season():
    days = observation_days()
    assert len(days) == 15
    assert days[0] == 91 and days[-1] == 196
    assert all(b > a for a, b in zip(days, days[1:]))


# -- patches --------------------------------------------------------------------

def test_make_patches_single_crop_is_input():
    img = np.random.default_rng(0).normal(size=(2, 3, 16, 16))
    crops = make_patches(img)
    assert len(crops) == 1
    np.testing.assert_array_equal(crops[0].image, img)


def test_make_patches_count_and_order():
    img = np.arange(48 * 32, dtype=float).reshape(1, 1, 48, 32)
    crops = make_patches(img)
    assert len(crops) == (48 // 16) * (32 // 16)
    # row-major: second crop starts 16 columns to the right
    assert crops[1].image[0, 0, 0, 0] == img[0, 0, 0, 16]
    assert crops[2].image[0, 0, 0, 0] == img[0, 0, 16, 0]


def test_make_patches_drops_remainder():
    img = np.ones((1, 1, 17, 16))
    crops = make_patches(img)
    assert len(crops) == 1 and crops[0].image.shape == (1, 1, 16, 16)


def test_make_patches_aligns_target():
    img = np.zeros((1, 1, 32, 32))
    tgt = np.arange(32 * 32, dtype=float).reshape(32, 32)
    crops = make_patches(img, tgt)
    np.testing.assert_array_equal(crops[3].target, tgt[16:, 16:])


def test_make_patches_too_small():
    with pytest.raises(ParameterError):
        make_patches(np.ones((1, 1, 15, 16)))


# -- generator ------------------------------------------------------------------

def test_generated_samples_satisfy_invariants(small_samples):
    for s in small_samples:
        s.validate(T=15)
        assert s.image.shape == (15, len(CHANNELS), 16, 16)
        for t, day in enumerate(s.days):
            np.testing.assert_array_equal(s.image[t, DOY_CHANNEL], encode_doy(day))
        assert np.all(s.climate[:, 0] <= s.climate[:, 1])
        assert np.all(s.target >= 0)


def test_at_least_one_sample_per_block_year(small_samples):
    keys = {(s.block_id, s.year) for s in small_samples}
    assert len(keys) == SMALL.n_cultivars * SMALL.blocks_per_cultivar * len(SMALL.years)


def test_generator_is_deterministic():
    a = generate_blocks(7, SMALL)
    b = generate_blocks(7, SMALL)
    for x, y in zip(a, b):
        assert x.image.tobytes() == y.image.tobytes()
        assert x.target.tobytes() == y.target.tobytes()
        assert x.climate.tobytes() == y.climate.tobytes()
        assert x.context_text == y.context_text


def test_different_seeds_differ():
    a = generate_fields(1, SMALL)[0]
    b = generate_fields(2, SMALL)[0]
    assert not np.array_equal(a.target, b.target)


def test_mean_target_tracks_latent_fertility():
    samples = generate_blocks(1, GenConfig())[:200]
    y = np.array([s.target.mean() for s in samples])
    x = np.array([s.latent["fertility"] for s in samples])
    X = np.stack([np.ones_like(x), x], axis=1)
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    r2 = 1 - np.sum((y - X @ coef) ** 2) / np.sum((y - y.mean()) ** 2)
    assert r2 > 0.5


def test_vigor_word_matches_latent(small_samples):
    words = {-1.0: "vigor low", 0.0: "vigor medium", 1.0: "vigor high"}
    for s in small_samples:
        assert words[s.latent["fertility"]] in s.context_text


def test_yield_range_covers_common_band():
    ys = np.concatenate([s.target.ravel() for s in generate_fields(1, GenConfig())])
    assert ys.min() < 22 and ys.max() > 54
    assert np.percentile(ys, 5) < 25 and np.percentile(ys, 95) > 55


def test_late_weeks_show_more_spatial_signal():
    f = generate_fields(3, SMALL)[0]
    nir = f.image[:, 3]
    corr = [abs(np.corrcoef(nir[t].ravel(), f.target.ravel())[0, 1]) for t in range(15)]
    assert corr[-1] > corr[0]


@pytest.mark.parametrize("kw", [dict(n_cultivars=0), dict(blocks_per_cultivar=0), dict(years=()), dict(field_px=8)])
def test_degenerate_config_rejected(kw):
    with pytest.raises(ParameterError):
        generate_blocks(0, GenConfig(**kw))


def test_validate_flags_bad_sample(small_samples):
    s = small_samples[0]
    bad = FieldSample(s.image, s.climate[:, [1, 0, 2, 3]], s.context_text, s.target, s.block_id, s.cultivar, s.year)
    with pytest.raises(DataError):
        bad.validate()


# -- splits ---------------------------------------------------------------------

def _blocks(spec):
    return [(f"{c}-{i}", c) for c, n in spec.items() for i in range(n)]


def test_bho_three_blocks_one_each():
    m = split_bho(_blocks({"A": 3}), 0)
    assert (len(m.train), len(m.val), len(m.test)) == (1, 1, 1)


def test_bho_nine_blocks_three_each():
    m = split_bho(_blocks({"A": 9}), 0)
    assert (len(m.train), len(m.val), len(m.test)) == (3, 3, 3)


def test_bho_two_blocks_train_and_test():
    m = split_bho(_blocks({"A": 2}), 0)
    assert (len(m.train), len(m.val), len(m.test)) == (1, 0, 1)


def test_bho_single_block_excluded_with_warning():
    with pytest.warns(UserWarning):
        m = split_bho(_blocks({"A": 1, "B": 3}), 0)
    assert m.excluded == ["A-0"]
    assert "A-0" not in m.train + m.val + m.test


def test_bho_same_seed_same_manifest():
    b = _blocks({"A": 5, "B": 4, "C": 3})
    assert split_bho(b, 11).to_dict() == split_bho(b, 11).to_dict()


@given(st.dictionaries(st.sampled_from("ABCDEF"), st.integers(1, 10), min_size=1), st.integers(0, 2**32 - 1))
@settings(max_examples=60, deadline=None)
def test_bho_partition_property(spec, seed):
    blocks = _blocks(spec)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        m = split_bho(blocks, seed)
    parts = [set(m.train), set(m.val), set(m.test)]
    assert sum(len(p) for p in parts) == len(set.union(*parts))
    singles = {f"{c}-0" for c, n in spec.items() if n == 1}
    assert set.union(*parts) == {b for b, _ in blocks} - singles
    for c, n in spec.items():
        if n >= 3:
            for p in parts:
                assert any(b.startswith(f"{c}-") for b in p)


# -- zones and CSR ----------------------------------------------------------------

def test_zone_examples():
    z = classify_yield_zones(np.array([[10.0, 30.0, 60.0]]))
    np.testing.assert_array_equal(z.labels, [[LER, CR, HER]])


def test_zone_threshold_equality_is_common():
    z = classify_yield_zones(np.array([22.0, 54.0]))
    np.testing.assert_array_equal(z.labels, [CR, CR])


def test_zone_rejects_non_finite():
    with pytest.raises(DataError):
        classify_yield_zones(np.array([1.0, np.nan]))


@given(arrays(float, (4, 5), elements=st.floats(0, 100)))
def test_zone_partition_and_determinism(t):
    th = ZoneThresholds()
    a = classify_yield_zones(t, th).labels
    assert set(np.unique(a)) <= {LER, CR, HER}
    np.testing.assert_array_equal(a == LER, t < th.low)
    np.testing.assert_array_equal(a == HER, t > th.high)
    np.testing.assert_array_equal(a, classify_yield_zones(t, th).labels)


def test_csr_single_bucket_uniform():
    w = csr_weights([np.full((2, 2), 30.0)] * 5)
    np.testing.assert_allclose(w, 0.2, rtol=0, atol=1e-15)


def test_csr_ratio_nine_to_one():
    maps = [np.full((2, 2), 30.0)] * 90 + [np.full((2, 2), 5.0)] * 10
    w = csr_weights(maps)
    assert w[-1] / w[0] == pytest.approx(9.0, rel=1e-12)
    assert abs(w.sum() - 1.0) < 1e-12


@given(st.lists(st.floats(0, 100), min_size=1, max_size=40))
def test_csr_equal_bucket_mass(means):
    maps = [np.full((1, 1), m) for m in means]
    w = csr_weights(maps)
    assert abs(w.sum() - 1.0) < 1e-12
    labels = np.array([1 if m < 22 else 3 if m > 54 else 2 for m in means])
    masses = [w[labels == b].sum() for b in np.unique(labels)]
    np.testing.assert_allclose(masses, 1.0 / len(masses), atol=1e-12)


def test_csr_needs_samples():
    with pytest.raises(ParameterError):
        csr_weights([])


# -- normalisation and persistence --------------------------------------------------

def test_norm_stats_standardise_train(small_samples):
    ns = NormStats.fit(small_samples)
    x = np.stack([ns.image(s.image) for s in small_samples])
    m = x.mean(axis=(0, 1, 3, 4))
    # the DOY channel is identical for all samples per week but varies over weeks
    np.testing.assert_allclose(m, 0.0, atol=1e-9)
    back = NormStats.from_arrays(ns.to_arrays())
    np.testing.assert_array_equal(back.image_std, ns.image_std)
    assert back.target_mean == ns.target_mean


def test_dataset_round_trip(tmp_path):
    ds = build_dataset(4, GenConfig(n_cultivars=2, blocks_per_cultivar=3, years=(2018,)))
    save_dataset(tmp_path / "d", ds)
    back = load_dataset(tmp_path / "d")
    assert back.manifest.to_dict() == ds.manifest.to_dict()
    assert back.config == ds.config and back.seed == ds.seed
    for a, b in zip(ds.samples, back.samples):
        assert a.image.tobytes() == b.image.tobytes()
        assert a.context_text == b.context_text
        assert (a.block_id, a.year, a.crop, a.days) == (b.block_id, b.year, b.crop, b.days)


def test_dataset_save_is_byte_identical(tmp_path):
    cfg = GenConfig(n_cultivars=2, blocks_per_cultivar=2, years=(2018,))
    for name in ("a", "b"):
        save_dataset(tmp_path / name, build_dataset(5, cfg))
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    for rel in files:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_load_dataset_missing(tmp_path):
    with pytest.raises(DataError):
        load_dataset(tmp_path)
