"""Incremental decoding with per-layer key/value caches and greedy generation.

Global layers keep every past key. Local layers keep a ring of the latest
``window`` keys; at inference local attention is always the sliding window,
whatever semantics the model was trained with. Chunk-approximation layers
keep the summaries of chunks that have left the window plus the individual
tokens that have not yet been folded into a summary.
"""

from __future__ import annotations

import math

import numpy as np

from lgattn.attention import GLOBAL, GLOBAL_APPROX, LOCAL, SLIDING_WINDOW
from lgattn.errors import ConfigError, ContractError
from lgattn.model import (
    ModelConfig,
    TransformerWeights,
    embed_tokens,
    finish_block,
    forward,
    output_logits,
    project_qkv,
)
from lgattn.numerics import Tensor, no_grad


class LayerCache:
    """Keys and values of one layer, with the absolute position of each entry."""

    kind: str

    def append(self, k: np.ndarray, v: np.ndarray, pos: int) -> None:
        raise NotImplementedError

    def entries(self):
        """``(keys [m, heads, hd], values, positions [m], logit_offsets [m] or None)``."""
        raise NotImplementedError

    def __len__(self) -> int:
        raise NotImplementedError


class GrowingCache(LayerCache):
    kind = GLOBAL

    def __init__(self, heads: int, head_dim: int, dtype):
        self.k = np.zeros((16, heads, head_dim), dtype=dtype)
        self.v = np.zeros_like(self.k)
        self.pos = np.zeros(16, dtype=np.int64)
        self.n = 0

    def append(self, k, v, pos):
        if self.n == len(self.pos):
            self.k = np.concatenate([self.k, np.zeros_like(self.k)])
            self.v = np.concatenate([self.v, np.zeros_like(self.v)])
            self.pos = np.concatenate([self.pos, np.zeros_like(self.pos)])
        self.k[self.n], self.v[self.n], self.pos[self.n] = k, v, pos
        self.n += 1

    def entries(self):
        return self.k[: self.n], self.v[: self.n], self.pos[: self.n], None

    def __len__(self):
        return self.n


class RingCache(LayerCache):
    """Fixed capacity; once full, each append overwrites the oldest entry."""

    kind = LOCAL

    def __init__(self, capacity: int, heads: int, head_dim: int, dtype):
        if capacity < 1:
            raise ConfigError("local cache capacity must be >= 1", key="window")
        self.capacity = capacity
        self.k = np.zeros((capacity, heads, head_dim), dtype=dtype)
        self.v = np.zeros_like(self.k)
        self.pos = np.full(capacity, -1, dtype=np.int64)
        self.start = 0
        self.n = 0

    def append(self, k, v, pos):
        if self.n < self.capacity:
            slot = (self.start + self.n) % self.capacity
            self.n += 1
        else:
            slot = self.start
            self.start = (self.start + 1) % self.capacity
        self.k[slot], self.v[slot], self.pos[slot] = k, v, pos

    def order(self) -> np.ndarray:
        return (self.start + np.arange(self.n)) % self.capacity

    def entries(self):
        idx = self.order()
        return self.k[idx], self.v[idx], self.pos[idx], None

    def __len__(self):
        return self.n


class ChunkCache(LayerCache):
    """Summaries of chunks wholly outside the window plus the remaining raw tokens."""

    kind = GLOBAL_APPROX

    def __init__(self, window: int, chunk: int, logit_side: bool = False):
        self.window, self.chunk, self.logit_side = window, chunk, logit_side
        self.sk: list[np.ndarray] = []
        self.sv: list[np.ndarray] = []
        self.spos: list[int] = []
        self.tk: list[np.ndarray] = []
        self.tv: list[np.ndarray] = []
        self.tpos: list[int] = []

    def _summarise(self, xs: list[np.ndarray]) -> np.ndarray:
        total = np.sum(xs, axis=0)
        if self.logit_side:
            return total / self.chunk
        return total + math.log(self.chunk)

    def append(self, k, v, pos):
        self.tk.append(k)
        self.tv.append(v)
        self.tpos.append(pos)
        n_chunks = max(0, (pos - self.window + 1) // self.chunk)
        c = self.chunk
        while len(self.sk) < n_chunks:
            self.sk.append(self._summarise(self.tk[:c]))
            self.sv.append(self._summarise(self.tv[:c]))
            self.spos.append(self.tpos[c - 1])
            del self.tk[:c], self.tv[:c], self.tpos[:c]

    def entries(self):
        keys = np.stack(self.sk + self.tk)
        values = np.stack(self.sv + self.tv)
        pos = np.array(self.spos + self.tpos, dtype=np.int64)
        offsets = None
        if self.logit_side:
            offsets = np.zeros(len(pos))
            offsets[: len(self.sk)] = math.log(self.chunk)
        return keys, values, pos, offsets

    def __len__(self):
        return len(self.sk) + len(self.tk)


def _new_cache(kind: str, cfg: ModelConfig, dtype) -> LayerCache:
    if kind == GLOBAL:
        return GrowingCache(cfg.n_heads, cfg.head_dim, dtype)
    if kind == LOCAL:
        return RingCache(cfg.window, cfg.n_heads, cfg.head_dim, dtype)
    return ChunkCache(cfg.window, cfg.chunk, cfg.logit_side_compensation)


def cached_attention(q: np.ndarray, cache: LayerCache, q_pos: int, slopes: np.ndarray | None) -> np.ndarray:
    """Single query ``q[heads, hd]`` against every cached entry."""
    keys, values, kpos, offsets = cache.entries()
    scores = np.einsum("hd,mhd->hm", q, keys) / math.sqrt(q.shape[-1])
    if offsets is not None:
        scores = scores + offsets[None, :]
    if slopes is not None:
        scores = scores - (q_pos - kpos)[None, :] * slopes[:, None]
    scores = scores - scores.max(axis=-1, keepdims=True)
    p = np.exp(scores)
    p /= p.sum(axis=-1, keepdims=True)
    return np.einsum("hm,mhd->hd", p, values)


class DecodeSession:
    """Single-sequence decoding state: one cache per layer plus the next position."""

    def __init__(self, weights: TransformerWeights):
        self.weights = weights
        cfg = weights.config
        dtype = weights["embed"].dtype
        self.kinds = cfg.layer_kinds()
        self.caches: list[LayerCache] = [_new_cache(k, cfg, dtype) for k in self.kinds]
        alibi = cfg.alibi()
        self.slopes = None if alibi is None else alibi.slopes
        self.position = 0

    def cache_entries(self) -> list[int]:
        return [len(c) for c in self.caches]

    def cache_bytes(self) -> int:
        cfg = self.weights.config
        itemsize = self.weights["embed"].dtype.itemsize
        return 2 * cfg.hidden_size * itemsize * sum(self.cache_entries())


def prefill(session: DecodeSession, prompt) -> np.ndarray:
    """Run the prompt through the model in one pass and fill the caches; returns last-position logits."""
    prompt = np.asarray(prompt, dtype=np.int64).reshape(-1)
    if prompt.size == 0:
        raise ContractError("prefill needs a nonempty prompt")
    if session.position != 0:
        raise ContractError("prefill needs a fresh session")
    with no_grad():
        logits, kv = forward(session.weights, prompt[None, :], local_semantics=SLIDING_WINDOW, return_kv=True)
    for cache, (k, v) in zip(session.caches, kv):
        for t in range(prompt.size):
            cache.append(k.data[0, t], v.data[0, t], t)
    session.position = prompt.size
    return logits.data[0, -1]


def decode_step(session: DecodeSession, token: int) -> np.ndarray:
    """Feed one token at the next position; returns its logits ``[vocab]``."""
    w = session.weights
    p = session.position
    with no_grad():
        x = embed_tokens(w, np.array([[int(token)]]), start_pos=p)
        for l, cache in enumerate(session.caches):
            q, k, v = project_qkv(w, l, x, [p])
            cache.append(k.data[0, 0], v.data[0, 0], p)
            ctx = cached_attention(q.data[0, 0], cache, p, session.slopes)
            x = finish_block(w, l, x, Tensor(ctx[None, None].astype(x.dtype)))
        logits = output_logits(w, x)
    session.position += 1
    return logits.data[0, 0]


def generate(session: DecodeSession, prompt, n_new: int, mode: str = "greedy") -> list[int]:
    """Greedy continuation of ``prompt``; ties go to the smallest token id."""
    if mode != "greedy":
        raise ConfigError(f"unsupported decoding mode {mode!r}", key="mode")
    if n_new < 1:
        raise ContractError("n_new must be >= 1")
    logits = prefill(session, prompt)
    out = []
    for i in range(n_new):
        tok = int(np.argmax(logits))  # first maximum -> smallest id
        out.append(tok)
        if i + 1 < n_new:
            logits = decode_step(session, tok)
    return out


def cache_entries_formula(kind: str, n_tokens: int, window: int | None = None, chunk: int | None = None) -> int:
    """Entries one layer of ``kind`` holds after ``n_tokens`` tokens."""
    if kind == GLOBAL:
        return n_tokens
    if window is None or window < 1:
        raise ConfigError("local cache needs window >= 1", key="window")
    if kind == LOCAL:
        return min(n_tokens, window)
    n_chunks = max(0, (n_tokens - window) // chunk)
    return n_chunks + n_tokens - n_chunks * chunk


def cache_memory(config: ModelConfig, n_tokens: int, bytes_per_el: int = 4) -> int:
    """Key + value cache bytes for the configured layer schedule after ``n_tokens`` tokens."""
    entries = sum(cache_entries_formula(k, n_tokens, config.window, config.chunk) for k in config.layer_kinds())
    return 2 * config.hidden_size * bytes_per_el * entries
