import hashlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cmavit.context import (
    BOS,
    N_RESERVED,
    PAD,
    VOCAB_SIZE,
    encode_context,
    null_context,
    split_words,
    token_id,
    tokenize,
)
from cmavit.core import Tensor
from cmavit.errors import ParameterError, UsageError
from cmavit.model import ModelConfig, init_params


def test_split_words_digits_and_punctuation():
    assert split_words("Soil pH 6.5, vigor HIGH.") == ["soil", "ph", "6", ".", "5", ",", "vigor", "high", "."]


def test_token_id_is_blake2b_fold():
    h = int.from_bytes(hashlib.blake2b(b"vigor", digest_size=8).digest(), "little")
    assert token_id("vigor") == 2 + h % (VOCAB_SIZE - 2)


def test_tokenize_layout():
    t = tokenize("vigor high", max_len=5)
    assert t.ids[0] == BOS
    assert t.ids[1:3] == (token_id("vigor"), token_id("high"))
    assert t.ids[3:] == (PAD, PAD)
    np.testing.assert_array_equal(t.pad_mask, [False, False, False, True, True])


def test_tokenize_truncates():
    t = tokenize("a b c d e f", max_len=4)
    assert len(t.ids) == 4 and PAD not in t.ids


def test_tokenize_empty_text_is_bos_only():
    assert tokenize("", max_len=3).ids == (BOS, PAD, PAD)


@pytest.mark.parametrize("kw", [dict(max_len=0), dict(vocab_size=2)])
def test_tokenize_rejects_bad_sizes(kw):
    with pytest.raises(ParameterError):
        tokenize("x", **kw)


@given(st.text(max_size=80), st.integers(1, 40), st.integers(3, 5000))
@settings(max_examples=80)
def test_tokenize_properties(text, max_len, vocab):
    t = tokenize(text, max_len, vocab)
    a = t.array()
    assert a.shape == (max_len,) and a[0] == BOS
    body = a[1:][a[1:] != PAD]
    assert np.all((body >= N_RESERVED) & (body < vocab))
    # padding is a suffix
    pads = np.flatnonzero(a == PAD)
    assert pads.size == 0 or np.all(np.diff(pads) == 1) and pads[-1] == max_len - 1
    assert tokenize(text, max_len, vocab) == t


def test_tokenize_case_insensitive():
    assert tokenize("Vigor HIGH") == tokenize("vigor high")


# -- encoder ----------------------------------------------------------------------

@pytest.fixture(scope="module")
def small():
    cfg = ModelConfig.tiny(vocab_size=64, max_context_len=6)
    return cfg, init_params(cfg, 3)


def test_encode_context_shapes(small):
    cfg, params = small
    ids = np.stack([tokenize("vigor low", 6, 64).array(), tokenize("a b c d e", 6, 64).array()])
    out = encode_context(ids, params, cfg.n_heads, cfg.n_layers)
    assert out.tokens.shape == (2, 6, cfg.d)
    np.testing.assert_array_equal(out.pad_mask, ids == PAD)


def test_padding_does_not_leak(small):
    """Changing what sits in padded slots leaves real-token outputs unchanged."""
    cfg, params = small
    a = tokenize("vigor low", 6, 64).array()
    params2 = dict(params)
    emb = params["ctx/embed"].data.copy()
    emb[PAD] += 5.0
    params2["ctx/embed"] = Tensor(emb)
    x = encode_context(a, params, cfg.n_heads, cfg.n_layers).tokens.data
    y = encode_context(a, params2, cfg.n_heads, cfg.n_layers).tokens.data
    real = a != PAD
    assert np.max(np.abs(x[0, real] - y[0, real])) < 1e-12


def test_encode_context_rejects_bad_ids(small):
    cfg, params = small
    with pytest.raises(UsageError):
        encode_context(np.array([[1, 64]]), params, cfg.n_heads, cfg.n_layers)
    with pytest.raises(UsageError):
        encode_context(np.ones((1, 7), dtype=int), params, cfg.n_heads, cfg.n_layers)


def test_null_context_broadcasts(small):
    cfg, params = small
    nc = null_context(params, 3)
    assert nc.tokens.shape == (1, 1, cfg.d)
    assert nc.pad_mask.shape == (3, 1) and not nc.pad_mask.any()
