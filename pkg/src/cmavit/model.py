"""CMAViT: satellite-image tokens with a meteorological attention bias,
cross-attention onto management-context tokens, and a per-week pixel head.

Token layout for one sample: index 0 is CLS, index 1 + t*N_p + p is spatial
patch p (row-major over the patch grid) of timestep t.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from cmavit.context import (
    VOCAB_SIZE,
    ContextEmbedding,
    context_shapes,
    encode_context,
    null_context,
    tokenize,
)
from cmavit.core import Tensor, archive, concat, dropout, embedding, linear, matmul, no_grad, reshape, swap_last, transpose
from cmavit.dataset import CHANNELS, CLIMATE_VARS, FieldSample, NormStats
from cmavit.errors import ConfigError, DataError, DimensionError
from cmavit.nn import (
    Params,
    attend,
    block_shapes,
    init_tensor,
    merge_heads,
    mlp_block,
    norm,
    split_heads,
)


@dataclass(frozen=True)
class ModelConfig:
    d: int = 64
    n_heads: int = 4
    n_layers: int = 3
    mlp_hidden: int = 128
    dropout_rate: float = 0.3
    patch_px: int = 8
    crop_px: int = 16
    T: int = 15
    n_channels: int = len(CHANNELS)
    n_met: int = len(CLIMATE_VARS)
    vocab_size: int = VOCAB_SIZE
    max_context_len: int = 32
    use_climate: bool = True
    use_context: bool = True

    def __post_init__(self):
        if self.d % self.n_heads:
            raise ConfigError(f"d={self.d} is not divisible by n_heads={self.n_heads}")
        if self.crop_px % self.patch_px:
            raise ConfigError(f"patch_px={self.patch_px} does not divide crop_px={self.crop_px}")
        if self.T < 1 or self.n_layers < 0 or self.d < 1:
            raise ConfigError("T and d must be positive and n_layers non-negative")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must lie in [0, 1)")

    @property
    def d_head(self) -> int:
        return self.d // self.n_heads

    @property
    def grid(self) -> int:
        return self.crop_px // self.patch_px

    @property
    def n_patches(self) -> int:
        return self.grid**2

    @property
    def seq_len(self) -> int:
        return self.T * self.n_patches + 1

    @classmethod
    def desk(cls, **kw) -> "ModelConfig":
        """Small width for CPU runs; lighter dropout suits the small synthetic set."""
        base = dict(dropout_rate=0.1)
        base.update(kw)
        return cls(**base)

    @classmethod
    def full_size(cls, **kw) -> "ModelConfig":
        """Published width/depth; too large for the desk-scale test-suite."""
        base = dict(d=768, n_heads=8, n_layers=6, mlp_hidden=2048, dropout_rate=0.3, max_context_len=128)
        base.update(kw)
        return cls(**base)

    @classmethod
    def tiny(cls, **kw) -> "ModelConfig":
        base = dict(d=8, n_heads=2, n_layers=1, mlp_hidden=16, dropout_rate=0.0, T=3, max_context_len=4)
        base.update(kw)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model settings: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TokenSequence:
    tokens: Tensor  # B x (T*N_p + 1) x d
    timestep: np.ndarray  # per token; -1 for CLS

    def __len__(self) -> int:
        return self.tokens.shape[1]


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    c, d = config, config.d
    shapes: dict[str, tuple[int, ...]] = {
        "patch/W": (c.n_channels * c.patch_px**2, d),
        "patch/b": (d,),
        "cls": (1, d),
        "temporal": (c.T + 1, d),
        "met/W": (c.n_met, d),
        "met/b": (d,),
    }
    for i in range(c.n_layers):
        shapes.update(block_shapes(f"enc{i}", d, c.mlp_hidden))
        shapes[f"enc{i}/met/Wq"] = (d, d)
        shapes[f"enc{i}/met/Wk"] = (d, d)
    shapes["enc/ln_f/g"] = (d,)
    shapes["enc/ln_f/b"] = (d,)
    shapes.update(context_shapes(d, c.n_layers, c.mlp_hidden, c.vocab_size, c.max_context_len))
    shapes.update(
        {
            "cross/ln/g": (d,),
            "cross/ln/b": (d,),
            "cross/Wq": (d, d),
            "cross/Wk": (d, d),
            "cross/Wv": (d, d),
            "head/W": (d, c.patch_px**2),
            "head/b": (c.patch_px**2,),
        }
    )
    return shapes


def init_params(config: ModelConfig, seed: int) -> Params:
    return {
        name: Tensor(init_tensor(name, shape, seed), requires_grad=True, name=name)
        for name, shape in param_shapes(config).items()
    }


def params_to_arrays(params: Params) -> dict[str, np.ndarray]:
    return {k: p.data for k, p in params.items()}


def params_from_arrays(arrays: dict[str, np.ndarray], config: ModelConfig) -> Params:
    shapes = param_shapes(config)
    missing = set(shapes) - set(arrays)
    if missing:
        raise DataError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
    out = {}
    for name, shape in shapes.items():
        if arrays[name].shape != shape:
            raise DataError(f"parameter {name!r} has shape {arrays[name].shape}, expected {shape}")
        out[name] = Tensor(np.array(arrays[name]), requires_grad=True, name=name)
    return out


# ---------------------------------------------------------------------------
# embeddings
# ---------------------------------------------------------------------------

def token_timesteps(T: int, n_patches: int) -> np.ndarray:
    return np.concatenate([[-1], np.repeat(np.arange(T), n_patches)])


def time_expansion(T: int, n_patches: int, cls: bool = True) -> np.ndarray:
    """0/1 matrix E (L x T) with E[token, t] = 1 iff the token belongs to week t.

    ``E @ B @ E.T`` copies B[t, t'] onto every (patch of t, patch of t')
    entry; the CLS row of E is zero, so CLS rows/columns receive no bias.
    """
    steps = np.repeat(np.arange(T), n_patches)
    E = np.zeros((len(steps) + int(cls), T))
    E[np.arange(len(steps)) + int(cls), steps] = 1.0
    return E


def patchify(images: np.ndarray, patch_px: int) -> np.ndarray:
    """(B, T, C, H, W) -> (B, T*N_p, C*patch_px^2), patches row-major."""
    B, T, C, H, W = images.shape
    g_r, g_c = H // patch_px, W // patch_px
    x = images.reshape(B, T, C, g_r, patch_px, g_c, patch_px)
    x = x.transpose(0, 1, 3, 5, 2, 4, 6)
    return x.reshape(B, T * g_r * g_c, C * patch_px * patch_px)


def embed_patches(images: np.ndarray, params: Params, config: ModelConfig) -> TokenSequence:
    images = np.asarray(images, dtype=float)
    if images.ndim == 4:
        images = images[None]
    want = (config.T, config.n_channels, config.crop_px, config.crop_px)
    if images.ndim != 5 or images.shape[1:] != want:
        raise DimensionError(f"image batch must be B x {want}, got {images.shape}")
    B = images.shape[0]
    patches = linear(Tensor(patchify(images, config.patch_px)), params["patch/W"], params["patch/b"])
    cls = params["cls"].reshape(1, 1, config.d)
    if B > 1:
        cls = concat([cls] * B, axis=0)
    tokens = concat([cls, patches], axis=1)
    steps = token_timesteps(config.T, config.n_patches)
    tokens = tokens + embedding(params["temporal"], steps + 1)
    return TokenSequence(tokens, steps)


def embed_met(climate: np.ndarray, params: Params) -> Tensor:
    """One d-vector per timestep: the 4 climate values through a linear map."""
    climate = np.asarray(climate, dtype=float)
    if climate.ndim == 2:
        climate = climate[None]
    if climate.shape[-1] != params["met/W"].shape[0]:
        raise DimensionError(f"climate must have {params['met/W'].shape[0]} variables, got {climate.shape}")
    return linear(Tensor(climate), params["met/W"], params["met/b"])


def met_query_key(met_tokens: Tensor, params: Params, layer: int, n_heads: int) -> tuple[Tensor, Tensor]:
    qm = split_heads(linear(met_tokens, params[f"enc{layer}/met/Wq"]), n_heads)
    km = split_heads(linear(met_tokens, params[f"enc{layer}/met/Wk"]), n_heads)
    return qm, km


# ---------------------------------------------------------------------------
# encoder
# ---------------------------------------------------------------------------

def stmm_attention(
    Qs: Tensor,
    Ks: Tensor,
    Vs: Tensor,
    Qm: Tensor | None,
    Km: Tensor | None,
    expand: np.ndarray,
) -> Tensor:
    """softmax(Qs Ks^T / sqrt(d_h) + E (Qm Km^T / sqrt(d_h)) E^T) Vs.

    Inputs carry arbitrary leading axes; ``expand`` is ``time_expansion``.
    With ``Qm``/``Km`` set to None the bias is dropped entirely.
    """
    L = Qs.shape[-2]
    if expand.shape[0] != L:
        raise DimensionError(f"expansion has {expand.shape[0]} rows for {L} tokens")
    if Qm is None or Km is None:
        return attend(Qs, Ks, Vs)
    if Qm.shape[-2] != expand.shape[1] or Km.shape[-2] != expand.shape[1]:
        raise DimensionError(
            f"climate has {Qm.shape[-2]} timesteps but the image sequence has {expand.shape[1]}"
        )
    scale = 1.0 / math.sqrt(Qs.shape[-1])
    week_bias = matmul(Qm, swap_last(Km)) * scale
    E = Tensor(expand)
    bias = matmul(matmul(E, week_bias), Tensor(expand.T))
    return attend(Qs, Ks, Vs, bias)


def stmm_encoder(
    tokens: TokenSequence,
    met_tokens: Tensor | None,
    params: Params,
    config: ModelConfig,
    rng=None,
    training: bool = False,
) -> TokenSequence:
    """Pre-norm blocks of multi-head STMM attention and a GELU MLP."""
    x = tokens.tokens
    h = config.n_heads
    expand = time_expansion(config.T, config.n_patches)
    rate = config.dropout_rate
    for i in range(config.n_layers):
        p = f"enc{i}"
        a = norm(x, params, f"{p}/ln1")
        q = split_heads(linear(a, params[f"{p}/attn/Wq"]), h)
        k = split_heads(linear(a, params[f"{p}/attn/Wk"]), h)
        v = split_heads(linear(a, params[f"{p}/attn/Wv"]), h)
        qm = km = None
        if met_tokens is not None:
            qm, km = met_query_key(met_tokens, params, i, h)
        att = linear(merge_heads(stmm_attention(q, k, v, qm, km, expand)), params[f"{p}/attn/Wo"])
        x = x + dropout(att, rate, rng, training)
        x = mlp_block(x, params, p, rate, rng, training)
    return TokenSequence(norm(x, params, "enc/ln_f"), tokens.timestep)


def cross_fuse(x_tokens: TokenSequence, context: ContextEmbedding, params: Params, config: ModelConfig) -> TokenSequence:
    """x + CA(LN(x) W_q, ctx W_k, ctx W_v) with padded context keys excluded.

    A fully padded context leaves ``x`` unchanged.
    """
    x = x_tokens.tokens
    h = config.n_heads
    q = split_heads(linear(norm(x, params, "cross/ln"), params["cross/Wq"]), h)
    k = split_heads(linear(context.tokens, params["cross/Wk"]), h)
    v = split_heads(linear(context.tokens, params["cross/Wv"]), h)
    key_mask = np.asarray(context.pad_mask, dtype=bool)[:, None, None, :]
    out = merge_heads(attend(q, k, v, key_mask=key_mask))
    return TokenSequence(x + out, x_tokens.timestep)


def decode_yield(tokens: TokenSequence | Tensor, params: Params, config: ModelConfig) -> Tensor:
    """Linear per-patch pixel head, reassembled into B x T x crop x crop maps.

    CLS is ignored; each output pixel depends only on its own patch token.
    """
    x = tokens.tokens if isinstance(tokens, TokenSequence) else tokens
    B = x.shape[0]
    c = config
    pix = linear(x[:, 1:], params["head/W"], params["head/b"])
    pix = reshape(pix, (B, c.T, c.grid, c.grid, c.patch_px, c.patch_px))
    pix = transpose(pix, (0, 1, 2, 4, 3, 5))
    return reshape(pix, (B, c.T, c.crop_px, c.crop_px))


# ---------------------------------------------------------------------------
# full network
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    images: np.ndarray  # B x T x C x H x W, standardised
    climate: np.ndarray  # B x T x 4, standardised
    context_ids: np.ndarray  # B x L_c
    targets: np.ndarray | None = None  # B x H x W, t/ha

    def __len__(self) -> int:
        return self.images.shape[0]


def make_batch(
    samples: Sequence[FieldSample],
    norm_stats: NormStats,
    config: ModelConfig,
    images: Sequence[np.ndarray] | None = None,
) -> Batch:
    """Standardise and stack samples; ``images`` overrides the raw images."""
    raw = [s.image for s in samples] if images is None else list(images)
    imgs = np.stack([norm_stats.image(x) for x in raw])
    clim = np.stack([norm_stats.climate(s.climate) for s in samples])
    ids = np.stack([_token_cache(s.context_text, config.max_context_len, config.vocab_size) for s in samples])
    tgt = np.stack([s.target for s in samples])
    return Batch(imgs, clim, ids, tgt)


_TOKEN_CACHE: dict[tuple[str, int, int], np.ndarray] = {}


def _token_cache(text: str, max_len: int, vocab: int) -> np.ndarray:
    key = (text, max_len, vocab)
    ids = _TOKEN_CACHE.get(key)
    if ids is None:
        ids = tokenize(text, max_len, vocab).array()
        ids.setflags(write=False)
        _TOKEN_CACHE[key] = ids
    return ids


def forward(
    batch: Batch,
    params: Params,
    config: ModelConfig,
    rng=None,
    training: bool = False,
    use_climate: bool | None = None,
    use_context: bool | None = None,
) -> Tensor:
    """B x T x crop x crop predictions on the standardised target scale.

    Masked climate drops the met bias; masked context swaps the encoded
    report for the learned null token. Defaults come from ``config``.
    """
    use_climate = config.use_climate if use_climate is None else use_climate
    use_context = config.use_context if use_context is None else use_context
    if batch.climate.shape[1] != config.T:
        raise DimensionError(f"climate has {batch.climate.shape[1]} timesteps, config expects T={config.T}")
    tokens = embed_patches(batch.images, params, config)
    met = embed_met(batch.climate, params) if use_climate else None
    enc = stmm_encoder(tokens, met, params, config, rng, training)
    if use_context:
        ctx = encode_context(
            batch.context_ids,
            params,
            config.n_heads,
            config.n_layers,
            dropout_rate=config.dropout_rate,
            rng=rng,
            training=training,
        )
    else:
        ctx = null_context(params, len(batch))
    fused = cross_fuse(enc, ctx, params, config)
    return decode_yield(fused, params, config)


# ---------------------------------------------------------------------------
# a trained model: config + params + normalisation
# ---------------------------------------------------------------------------

@dataclass
class Model:
    config: ModelConfig
    params: Params
    norm: NormStats
    meta: dict = field(default_factory=dict)

    def predict(self, samples: Sequence[FieldSample], batch_size: int = 32) -> np.ndarray:
        """N x T x crop x crop yield maps in t/ha (inference mode)."""
        out = []
        with no_grad():
            for i in range(0, len(samples), batch_size):
                batch = make_batch(samples[i : i + batch_size], self.norm, self.config)
                pred = forward(batch, self.params, self.config).data
                out.append(pred * self.norm.target_std + self.norm.target_mean)
        if not out:
            return np.zeros((0, self.config.T, self.config.crop_px, self.config.crop_px))
        return np.concatenate(out)

    def with_config(self, **kw) -> "Model":
        return Model(replace(self.config, **kw), self.params, self.norm, dict(self.meta))

    def save(self, path: str | Path) -> Path:
        root = Path(path)
        root.mkdir(parents=True, exist_ok=True)
        archive.save(root / "params.bin", params_to_arrays(self.params))
        archive.save(root / "norm.bin", self.norm.to_arrays())
        doc = {"model": self.config.to_dict(), "meta": self.meta}
        (root / "config.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return root

    @classmethod
    def load(cls, path: str | Path) -> "Model":
        root = Path(path)
        if not (root / "config.json").is_file():
            raise DataError(f"no checkpoint at {root}")
        doc = json.loads((root / "config.json").read_text(encoding="utf-8"))
        config = ModelConfig.from_dict(doc["model"])
        params = params_from_arrays(archive.load(root / "params.bin"), config)
        norm_stats = NormStats.from_arrays(archive.load(root / "norm.bin"))
        return cls(config, params, norm_stats, doc.get("meta", {}))
