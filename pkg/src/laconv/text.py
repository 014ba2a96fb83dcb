"""Token vocabulary and the language encoder (embeddings -> GRU -> self-attention)."""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .nn import Module, param, zeros
from .tensor import Tensor

PAD, UNK = "<pad>", "<unk>"


class Vocabulary:
    """Dense token ids; 0 is ``<pad>`` and 1 is ``<unk>``."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.token_to_id: dict[str, int] = {PAD: 0, UNK: 1}
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        if token not in self.token_to_id:
            self.token_to_id[token] = len(self.token_to_id)
        return self.token_to_id[token]

    def __len__(self) -> int:
        return len(self.token_to_id)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def id(self, token: str) -> int:
        return self.token_to_id.get(token, 1)

    def token(self, idx: int) -> str:
        return self.id_to_token[idx]

    @property
    def id_to_token(self) -> list[str]:
        out = [""] * len(self.token_to_id)
        for tok, i in self.token_to_id.items():
            out[i] = tok
        return out

    def to_json(self) -> str:
        return json.dumps(self.token_to_id, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Vocabulary":
        mapping = json.loads(text)
        ids = sorted(mapping.values())
        if ids != list(range(len(ids))) or mapping.get(PAD) != 0 or mapping.get(UNK) != 1:
            raise ValueError("vocabulary ids must be dense with <pad>=0 and <unk>=1")
        vocab = cls()
        vocab.token_to_id = dict(sorted(mapping.items(), key=lambda kv: kv[1]))
        return vocab


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    """Lowercase, split on whitespace, map out-of-vocabulary words to ``<unk>``."""
    words = text.lower().split()
    if not words:
        raise ValueError("cannot tokenize an empty expression")
    return [vocab.id(w) for w in words]


def pad_batch(seqs: Sequence[Sequence[int]], max_len: int) -> np.ndarray:
    """Right-pad id sequences with 0, truncating anything beyond ``max_len``."""
    if any(len(s) > max_len for s in seqs):
        warnings.warn(f"expression longer than max_len={max_len}; truncated", stacklevel=2)
    width = min(max(len(s) for s in seqs), max_len)
    out = np.zeros((len(seqs), width), dtype=np.int64)
    for i, s in enumerate(seqs):
        s = list(s)[:width]
        out[i, :len(s)] = s
    return out


@dataclass
class TextFeatures:
    """Per-token features ``(B, l, d)``, boolean mask ``(B, l)`` and masked mean ``(B, d)``."""

    features: Tensor
    mask: np.ndarray
    pooled: Tensor

    @property
    def length(self) -> int:
        return self.features.shape[1]


def masked_pool(features: Tensor, mask: np.ndarray) -> Tensor:
    m = mask.astype(features.dtype)
    counts = m.sum(1, keepdims=True)
    return T.div(T.sum_(T.mul(features, m[..., None]), axis=1), counts)


class TextEncoder(Module):
    def __init__(self, vocab_size: int, embed_dim: int = 64, dim: int = 64, heads: int = 2,
                 max_len: int = 16, rng: np.random.Generator | None = None, dtype=np.float32):
        if dim % heads:
            raise ValueError("text dim must be divisible by the head count")
        rng = rng or np.random.default_rng(0)
        self.dim, self.heads, self.max_len = dim, heads, max_len
        self.embed = param(rng, (vocab_size, embed_dim), scale=1.0, dtype=dtype)
        self.gru_wx = param(rng, (embed_dim, 3 * dim), dtype=dtype)
        self.gru_wh = param(rng, (dim, 3 * dim), dtype=dtype)
        self.gru_bx = zeros(3 * dim, dtype)
        self.gru_bh = zeros(3 * dim, dtype)
        self.att_q = param(rng, (dim, dim), dtype=dtype)
        self.att_k = param(rng, (dim, dim), dtype=dtype)
        self.att_v = param(rng, (dim, dim), dtype=dtype)
        self.att_o = param(rng, (dim, dim), dtype=dtype)

    def __call__(self, ids) -> TextFeatures:
        return encode_text(ids, self)


def _gru(x: Tensor, mask: np.ndarray, enc: TextEncoder) -> Tensor:
    B, L, _ = x.shape
    d = enc.dim
    gx = T.linear(x, enc.gru_wx, enc.gru_bx)
    h = Tensor(np.zeros((B, d), dtype=x.dtype))
    outs = []
    for t in range(L):
        xt = gx[:, t]
        gh = T.linear(h, enc.gru_wh, enc.gru_bh)
        z = T.sigmoid(xt[:, :d] + gh[:, :d])
        r = T.sigmoid(xt[:, d:2 * d] + gh[:, d:2 * d])
        n = T.tanh(xt[:, 2 * d:] + r * gh[:, 2 * d:])
        h_new = n + z * (h - n)
        m = mask[:, t:t + 1].astype(x.dtype)
        # pads leave the state untouched
        h = h + m * (h_new - h)
        outs.append(T.reshape(h * m, (B, 1, d)))
    return T.concat(outs, axis=1)


def self_attention(h: Tensor, mask: np.ndarray, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor, heads: int) -> Tensor:
    B, L, d = h.shape
    dh = d // heads

    def split(t):
        return T.transpose(T.reshape(t, (B, L, heads, dh)), (0, 2, 1, 3))

    q, k, v = split(T.linear(h, wq)), split(T.linear(h, wk)), split(T.linear(h, wv))
    logits = T.mul(q @ T.transpose(k, (0, 1, 3, 2)), 1.0 / np.sqrt(dh))
    att = T.softmax(logits, mask=mask[:, None, None, :])
    out = T.reshape(T.transpose(att @ v, (0, 2, 1, 3)), (B, L, d))
    return T.linear(out, wo)


def encode_text(ids, enc: TextEncoder) -> TextFeatures:
    """Encode one id sequence or a batch of them into :class:`TextFeatures`.

    A flat sequence is treated as a batch of one. Id 0 marks padding.
    """
    if isinstance(ids, np.ndarray) and ids.ndim == 2:
        arr = ids
        if arr.shape[1] > enc.max_len:
            warnings.warn(f"expression longer than max_len={enc.max_len}; truncated", stacklevel=2)
            arr = arr[:, :enc.max_len]
    else:
        seqs = list(ids)
        if seqs and isinstance(seqs[0], (int, np.integer)):
            seqs = [seqs]
        arr = pad_batch(seqs, enc.max_len)
    if arr.shape[1] < 1:
        raise ValueError("empty token sequence")
    mask = arr != 0
    if not mask.any(axis=1).all():
        raise ValueError("every sequence needs at least one real token")
    x = T.embedding(enc.embed, arr)
    h = _gru(x, mask, enc)
    y = h + self_attention(h, mask, enc.att_q, enc.att_k, enc.att_v, enc.att_o, enc.heads)
    y = T.mul(y, mask[..., None].astype(y.dtype))
    return TextFeatures(features=y, mask=mask, pooled=masked_pool(y, mask))


def features_from_array(y: np.ndarray | Tensor, mask: np.ndarray | None = None) -> TextFeatures:
    """Wrap raw ``(B, l, d)`` features (bypassing the encoder)."""
    y = y if isinstance(y, Tensor) else Tensor(y)
    if mask is None:
        mask = np.ones(y.shape[:2], dtype=bool)
    y = T.mul(y, mask[..., None].astype(y.dtype))
    return TextFeatures(features=y, mask=mask, pooled=masked_pool(y, mask))
