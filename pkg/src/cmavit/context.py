"""Management-report tokenizer and the self-attention context encoder."""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass

import numpy as np

from cmavit.core import Tensor, dropout, embedding
from cmavit.errors import ParameterError, UsageError
from cmavit.nn import Params, block_shapes, mlp_block, norm, self_attention

PAD = 0
BOS = 1
N_RESERVED = 2
VOCAB_SIZE = 4096
DEFAULT_MAX_LEN = 128

# single digits, letter runs, then any other non-space character on its own
_TOKEN_RE = re.compile(r"\d|[^\W\d_]+|[^\w\s]|_")


def split_words(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def token_id(token: str, vocab_size: int = VOCAB_SIZE) -> int:
    """BLAKE2b-64 of the UTF-8 token, folded into the non-reserved id range."""
    h = int.from_bytes(hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest(), "little")
    return N_RESERVED + h % (vocab_size - N_RESERVED)


@dataclass(frozen=True)
class TokenIds:
    ids: tuple[int, ...]
    max_len: int

    def array(self) -> np.ndarray:
        return np.asarray(self.ids, dtype=np.int64)

    @property
    def pad_mask(self) -> np.ndarray:
        return self.array() == PAD


def tokenize(text: str, max_len: int = DEFAULT_MAX_LEN, vocab_size: int = VOCAB_SIZE) -> TokenIds:
    """BOS, then hashed tokens truncated to fit, then PAD up to ``max_len``."""
    if max_len < 1:
        raise ParameterError("max_len must be at least 1")
    if vocab_size <= N_RESERVED:
        raise ParameterError(f"vocab_size must exceed {N_RESERVED}")
    body = [token_id(w, vocab_size) for w in split_words(text)][: max_len - 1]
    ids = [BOS] + body + [PAD] * (max_len - 1 - len(body))
    return TokenIds(tuple(ids), max_len)


@dataclass
class ContextEmbedding:
    tokens: Tensor  # B x L_c x d
    pad_mask: np.ndarray  # B x L_c, True where padded


def context_shapes(d: int, n_layers: int, mlp_hidden: int, vocab_size: int, max_len: int) -> dict[str, tuple[int, ...]]:
    shapes = {"ctx/embed": (vocab_size, d), "ctx/pos": (max_len, d)}
    for i in range(n_layers):
        shapes.update(block_shapes(f"ctx{i}", d, mlp_hidden))
    shapes["ctx/ln_f/g"] = (d,)
    shapes["ctx/ln_f/b"] = (d,)
    shapes["ctx/null"] = (1, d)
    return shapes


def encode_context(
    ids,
    params: Params,
    n_heads: int,
    n_layers: int,
    *,
    dropout_rate: float = 0.0,
    rng=None,
    training: bool = False,
) -> ContextEmbedding:
    """Token + learned position embeddings through pre-norm self-attention blocks.

    ``ids`` is a ``TokenIds``, a 1-d id array, or a B x L_c id array.
    """
    if isinstance(ids, TokenIds):
        ids = ids.array()
    ids = np.asarray(ids)
    if ids.ndim == 1:
        ids = ids[None, :]
    vocab, _ = params["ctx/embed"].shape
    if ids.min(initial=0) < 0 or ids.max(initial=0) >= vocab:
        raise UsageError(f"token id outside [0, {vocab})")
    L = ids.shape[1]
    if L > params["ctx/pos"].shape[0]:
        raise UsageError(f"context of {L} tokens exceeds the {params['ctx/pos'].shape[0]} learned positions")
    pad = ids == PAD
    key_mask = pad[:, None, None, :]
    x = embedding(params["ctx/embed"], ids) + params["ctx/pos"][:L]
    for i in range(n_layers):
        prefix = f"ctx{i}"
        x = x + dropout(self_attention(x, params, prefix, n_heads, key_mask=key_mask), dropout_rate, rng, training)
        x = mlp_block(x, params, prefix, dropout_rate, rng, training)
    return ContextEmbedding(norm(x, params, "ctx/ln_f"), pad)


def null_context(params: Params, batch: int) -> ContextEmbedding:
    """The learned stand-in used when the management modality is masked.

    A single 1 x 1 x d token that broadcasts over the batch.
    """
    null = params["ctx/null"]
    return ContextEmbedding(null.reshape(1, 1, null.shape[1]), np.zeros((batch, 1), dtype=bool))
