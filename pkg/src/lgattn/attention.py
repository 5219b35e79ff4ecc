"""Causal attention strategies: global, windowed local, local plus chunk summaries, grouped.

Every kernel takes per-head tensors laid out ``[*batch, n, heads, head_dim]``
and returns the context vectors in the same layout. ``mask`` is an optional
boolean array broadcastable to ``[*batch, heads, n, n]`` (query x key
validity); the structural constraint of each strategy (causal, window,
block band) is intersected with it.

Kernels report the multiply-accumulates they perform to an active
:class:`OpCounter`: ``2 * head_dim`` per admissible (query, key) pair, one
for the score contraction and one for the context contraction.
"""

from __future__ import annotations

import contextlib
import contextvars
import math
from dataclasses import dataclass
from typing import Iterator, Literal

import numpy as np

from lgattn.errors import ConfigError, ShapeError
from lgattn.numerics import Tensor, add, concat, matmul, pad, reshape, scale, softmax_masked, swapaxes
from lgattn.posenc import AlibiParams, alibi_bias

GLOBAL = "global"
LOCAL = "local"
GLOBAL_APPROX = "global_approx"
GROUP = "group"
ATTN_KINDS = (GLOBAL, LOCAL, GLOBAL_APPROX, GROUP)

SLIDING_WINDOW = "sliding_window"
BLOCK_BANDED = "block_banded"
LOCAL_SEMANTICS = (SLIDING_WINDOW, BLOCK_BANDED)

LayerKind = Literal["global", "local", "global_approx"]


# -- instrumentation -----------------------------------------------------------

class OpCounter:
    """Tally of attention multiply-accumulates, split by layer kind."""

    def __init__(self) -> None:
        self.by_kind: dict[str, int] = {}

    def add(self, kind: str, macs: int) -> None:
        self.by_kind[kind] = self.by_kind.get(kind, 0) + int(macs)

    @property
    def total(self) -> int:
        return sum(self.by_kind.values())


_counter: contextvars.ContextVar[OpCounter | None] = contextvars.ContextVar("attn_counter", default=None)


@contextlib.contextmanager
def count_attention_ops() -> Iterator[OpCounter]:
    counter = OpCounter()
    token = _counter.set(counter)
    try:
        yield counter
    finally:
        _counter.reset(token)


def _record(kind: str, admissible: np.ndarray, batch_shape: tuple[int, ...], n_heads: int, head_dim: int) -> None:
    counter = _counter.get()
    if counter is None:
        return
    full = np.broadcast_to(admissible, batch_shape + (n_heads,) + admissible.shape[-2:])
    counter.add(kind, 2 * head_dim * int(np.count_nonzero(full)))


_faults: set[str] = set()


@contextlib.contextmanager
def inject_fault(name: str) -> Iterator[None]:
    """Test hook: deliberately break a kernel. Only ``"blockwise_mask"`` is known."""
    _faults.add(name)
    try:
        yield
    finally:
        _faults.discard(name)


# -- kinds and schedule --------------------------------------------------------

@dataclass(frozen=True)
class AttnKind:
    name: str
    window: int | None = None
    chunk: int | None = None
    group_size: int | None = None

    def __post_init__(self):
        if self.name not in ATTN_KINDS:
            raise ConfigError(f"unknown attention kind {self.name!r}; expected one of {ATTN_KINDS}", key="attn")
        if self.name == GROUP and (self.group_size is None or self.group_size < 1):
            raise ConfigError("attn=group needs group_size >= 1", key="group_size")
        if self.name in (LOCAL, GLOBAL_APPROX, GROUP):
            if self.window is None or self.window < 1:
                raise ConfigError(f"attn={self.name} needs window >= 1", key="window")
        if self.name == GLOBAL_APPROX and (self.chunk is None or self.chunk < 1):
            raise ConfigError("attn=global_approx needs chunk >= 1", key="chunk")

    def layer_kinds(self, n_layers: int) -> list[str]:
        if self.name == GROUP:
            return GroupSchedule(n_layers, self.group_size).kinds
        return [self.name] * n_layers


def layer_kind(l: int, L: int) -> str:
    """The first layer of every group of ``L`` is global, the rest local."""
    if l < 0 or L < 1:
        raise ConfigError(f"layer_kind needs l >= 0 and L >= 1, got l={l}, L={L}")
    return GLOBAL if l % L == 0 else LOCAL


@dataclass(frozen=True)
class GroupSchedule:
    n_layers: int
    L: int

    @property
    def kinds(self) -> list[str]:
        return [layer_kind(l, self.L) for l in range(self.n_layers)]

    @property
    def n_global(self) -> int:
        return sum(k == GLOBAL for k in self.kinds)


# -- structural masks ----------------------------------------------------------

def causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


def sliding_window_mask(n: int, w: int) -> np.ndarray:
    """Query i sees keys max(0, i-w+1) .. i."""
    i = np.arange(n)[:, None]
    j = np.arange(n)[None, :]
    return (j <= i) & (j > i - w)


def block_banded_mask(n: int, w: int) -> np.ndarray:
    """Query in block b = i // w sees blocks b-1 and b, up to itself."""
    i = np.arange(n)[:, None]
    j = np.arange(n)[None, :]
    return (j <= i) & (j // w >= i // w - 1)


# -- projections and similarity -----------------------------------------------

def qkv_project(h: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, n_heads: int) -> tuple[Tensor, Tensor, Tensor]:
    """Project ``h[..., n, d]`` and split into ``[..., n, heads, d // heads]``."""
    d = h.shape[-1]
    if d % n_heads:
        raise ConfigError(f"hidden size {d} is not divisible by {n_heads} heads", key="n_heads")
    for name, w in (("Wq", wq), ("Wk", wk), ("Wv", wv)):
        if w.shape[0] != d or w.shape[1] != d:
            raise ConfigError(f"{name} has shape {w.shape}, expected ({d}, {d})")
    split = h.shape[:-1] + (n_heads, d // n_heads)
    return tuple(reshape(matmul(h, w), split) for w in (wq, wk, wv))  # type: ignore[return-value]


def sim(q_i, k_j, d: int) -> float:
    """Unnormalised similarity exp(q.k / sqrt(d))."""
    return math.exp(float(np.dot(np.ravel(q_i), np.ravel(k_j))) / math.sqrt(d))


# -- core ----------------------------------------------------------------------

def _heads_first(x: Tensor) -> Tensor:
    return swapaxes(x, -3, -2)


def _positions(positions, n: int) -> np.ndarray:
    if positions is None:
        return np.arange(n)
    positions = np.asarray(positions)
    if positions.shape != (n,):
        raise ShapeError(f"expected {n} positions, got shape {positions.shape}")
    return positions


def _check_qkv(q: Tensor, k: Tensor, v: Tensor) -> None:
    if q.ndim < 3 or q.shape != k.shape or k.shape != v.shape:
        raise ShapeError(f"q, k, v must share a [..., n, heads, head_dim] shape, got {q.shape}, {k.shape}, {v.shape}")


def _combine(structural: np.ndarray, mask) -> np.ndarray:
    if mask is None:
        return structural
    return np.asarray(mask, dtype=bool) & structural


def _attend(qh: Tensor, kh: Tensor, vh: Tensor, admissible: np.ndarray, bias: np.ndarray | None):
    """Masked softmax attention on heads-first tensors; returns (context, probs)."""
    scores = scale(matmul(qh, swapaxes(kh, -1, -2)), 1.0 / math.sqrt(qh.shape[-1]))
    if bias is not None:
        scores = add(scores, bias.astype(scores.dtype))
    probs = softmax_masked(scores, admissible)
    return matmul(probs, vh), probs


def masked_attention(q: Tensor, k: Tensor, v: Tensor, admissible: np.ndarray, *, positions=None,
                     alibi: AlibiParams | None = None, kind: str = GLOBAL, return_probs: bool = False):
    """Reference attention under an explicit ``admissible[..., n, n]`` pattern."""
    _check_qkv(q, k, v)
    n, heads, hd = q.shape[-3:]
    pos = _positions(positions, n)
    bias = alibi_bias(alibi, pos, pos) if alibi is not None else None
    _record(kind, admissible, q.shape[:-3], heads, hd)
    ctx, probs = _attend(_heads_first(q), _heads_first(k), _heads_first(v), admissible, bias)
    ctx = _heads_first(ctx)
    return (ctx, probs) if return_probs else ctx


def global_attention(q, k, v, mask=None, *, positions=None, alibi=None, return_probs=False):
    """Every query attends to itself and all earlier positions."""
    n = q.shape[-3]
    return masked_attention(q, k, v, _combine(causal_mask(n), mask), positions=positions, alibi=alibi,
                            kind=GLOBAL, return_probs=return_probs)


def local_attention_naive(q, k, v, w: int, mask=None, semantics: str = SLIDING_WINDOW, *, positions=None,
                          alibi=None, return_probs=False):
    """Windowed attention via a full masked score matrix (the reference path)."""
    if w < 1:
        raise ConfigError("window must be >= 1", key="window")
    n = q.shape[-3]
    if semantics == SLIDING_WINDOW:
        structural = sliding_window_mask(n, w)
    elif semantics == BLOCK_BANDED:
        structural = block_banded_mask(n, w)
    else:
        raise ConfigError(f"unknown local semantics {semantics!r}", key="local_semantics")
    return masked_attention(q, k, v, _combine(structural, mask), positions=positions, alibi=alibi,
                            kind=LOCAL, return_probs=return_probs)


def local_attention_blockwise(q: Tensor, k: Tensor, v: Tensor, w: int, mask=None, *, positions=None,
                              alibi: AlibiParams | None = None) -> Tensor:
    """Block-banded local attention computed tile by tile.

    The sequence is zero-padded to a multiple of ``w`` and cut into blocks;
    each block's queries score against the concatenation of the previous
    block and their own (``w x 2w`` tiles). The first block's predecessor is
    an all-invalid zero block. Padded keys are never admissible to real
    queries; padded query rows attend to themselves only and are stripped.
    """
    _check_qkv(q, k, v)
    if w < 1:
        raise ConfigError("window must be >= 1", key="window")
    n, heads, hd = q.shape[-3:]
    batch = q.shape[:-3]
    pos = _positions(positions, n)
    extra = (-n) % w
    P = n + extra
    nb = P // w

    def blocks(x: Tensor) -> Tensor:
        x = pad(x, [(0, 0)] * len(batch) + [(0, extra), (0, 0), (0, 0)])
        return reshape(_heads_first(x), batch + (heads, nb, w, hd))

    qb, kb, vb = blocks(q), blocks(k), blocks(v)
    zero = Tensor(np.zeros(batch + (heads, 1, w, hd), dtype=q.dtype))

    def with_predecessor(xb: Tensor) -> Tensor:
        prev = concat([zero, xb[..., :-1, :, :]], axis=-3) if nb > 1 else zero
        return concat([prev, xb], axis=-2)

    k2, v2 = with_predecessor(kb), with_predecessor(vb)

    # tile coordinates: query (b, r) sits at b*w + r; key (b, c) at (b-1)*w + c
    b_idx = np.arange(nb)[:, None, None]
    r_idx = np.arange(w)[None, :, None]
    c_idx = np.arange(2 * w)[None, None, :]
    q_abs = b_idx * w + r_idx
    k_abs = (b_idx - 1) * w + c_idx
    band = (k_abs <= q_abs) & (k_abs >= 0) & (k_abs < n)
    if "blockwise_mask" in _faults:
        band = (k_abs >= 0) & (k_abs < P)
    admissible = np.broadcast_to(band, (nb, w, 2 * w))
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        m = np.broadcast_to(m, m.shape[:-2] + (n, n))
        mp = np.zeros(m.shape[:-2] + (P, P), dtype=bool)
        mp[..., :n, :n] = m
        orig = mp[..., q_abs, np.clip(k_abs, 0, P - 1)]
        admissible = admissible & orig
    pad_query = (q_abs >= n) & (k_abs == q_abs)
    admissible = admissible | pad_query

    real_rows = np.broadcast_to(q_abs < n, admissible.shape)
    counted = np.broadcast_to(admissible & real_rows, batch + (heads, nb, w, 2 * w))
    _record(LOCAL, counted.reshape(batch + (heads, nb * w, 2 * w)), batch, heads, hd)

    bias = None
    if alibi is not None:
        full_pos = np.concatenate([pos, pos[-1] + 1 + np.arange(extra)]) if extra else pos
        qp = full_pos[np.minimum(q_abs[:, :, 0], P - 1)]
        kp = full_pos[np.clip(k_abs[:, 0, :], 0, P - 1)]
        bias = np.swapaxes(alibi_bias(alibi, qp, kp), 0, 1)  # [heads, nb, w, 2w]

    ctx, _ = _attend(qb, k2, v2, admissible, bias)
    ctx = _heads_first(reshape(ctx, batch + (heads, P, hd)))
    return ctx[..., :n, :, :] if extra else ctx


# -- chunk approximation -------------------------------------------------------

def chunk_summaries(x: Tensor, c: int, logit_side_compensation: bool = False) -> Tensor | None:
    """One summary per full chunk of ``c`` consecutive positions of ``x[..., n, heads, hd]``.

    Default: elementwise sum over the chunk plus ln(c) on every component.
    With ``logit_side_compensation`` the summary is the chunk mean and ln(c)
    is instead added to the chunk's attention logit by the caller. Trailing
    positions that do not fill a chunk produce nothing; returns ``None``
    when there is no full chunk.
    """
    if c < 1:
        raise ConfigError("chunk must be >= 1", key="chunk")
    n = x.shape[-3]
    m = n // c
    if m == 0:
        return None
    body = x if m * c == n else x[..., : m * c, :, :]
    grouped = reshape(body, x.shape[:-3] + (m, c) + x.shape[-2:])
    total = grouped.sum(axis=-3)
    if logit_side_compensation:
        return scale(total, 1.0 / c)
    return add(total, math.log(c))


def approx_pattern(n: int, w: int, c: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Admissibility of tokens ``[n, n]`` and chunk summaries ``[n, n // c]`` per query.

    A chunk is summarised for query i once its last token is <= i - w; the
    non-local tokens left over between the last such chunk and the window
    are attended individually. Also returns the per-query chunk count.
    """
    i = np.arange(n)
    n_chunks = np.maximum(0, (i - w + 1) // c)
    j = np.arange(n)[None, :]
    tokens = (j <= i[:, None]) & (j >= n_chunks[:, None] * c)
    chunks = np.arange(n // c)[None, :] < n_chunks[:, None]
    return tokens, chunks, n_chunks


def global_approx_attention(q, k, v, w: int, c: int, mask=None, *, positions=None,
                            alibi: AlibiParams | None = None, logit_side_compensation: bool = False,
                            return_probs: bool = False):
    """Sliding-window attention plus summaries of fully non-local chunks, in one softmax."""
    _check_qkv(q, k, v)
    if w < 1 or c < 1:
        raise ConfigError("global_approx needs window >= 1 and chunk >= 1")
    n, heads, hd = q.shape[-3:]
    pos = _positions(positions, n)
    ks = chunk_summaries(k, c, logit_side_compensation)
    if ks is None:
        return local_attention_naive(q, k, v, w, mask, SLIDING_WINDOW, positions=positions, alibi=alibi,
                                     return_probs=return_probs)
    vs = chunk_summaries(v, c, logit_side_compensation)
    m = n // c
    tok_ok, chunk_ok, _ = approx_pattern(n, w, c)
    if mask is not None:
        msk = np.asarray(mask, dtype=bool)
        msk = np.broadcast_to(msk, msk.shape[:-2] + (n, n))
        chunk_valid = msk[..., : m * c].reshape(msk.shape[:-1] + (m, c)).all(axis=-1)
        tok_ok = tok_ok & msk
        chunk_ok = chunk_ok & chunk_valid
    lead = np.broadcast_shapes(tok_ok.shape[:-2], chunk_ok.shape[:-2])
    admissible = np.concatenate([np.broadcast_to(tok_ok, lead + (n, n)), np.broadcast_to(chunk_ok, lead + (n, m))],
                                axis=-1)

    bias = np.zeros((1, n, n + m))
    if logit_side_compensation:
        bias[..., n:] = math.log(c)
    if alibi is not None:
        chunk_pos = pos[np.arange(m) * c + c - 1]
        bias = bias + alibi_bias(alibi, pos, np.concatenate([pos, chunk_pos]))
    if alibi is None and not logit_side_compensation:
        bias = None

    _record(GLOBAL_APPROX, admissible, q.shape[:-3], heads, hd)
    k_ext = concat([k, ks], axis=-3)
    v_ext = concat([v, vs], axis=-3)
    ctx, probs = _attend(_heads_first(q), _heads_first(k_ext), _heads_first(v_ext), admissible, bias)
    ctx = _heads_first(ctx)
    return (ctx, probs) if return_probs else ctx


# -- dispatch ------------------------------------------------------------------

def apply_layer_attention(layer: str, q, k, v, *, window=None, chunk=None, semantics=BLOCK_BANDED,
                          kernel: str = "blockwise", mask=None, positions=None, alibi=None,
                          logit_side_compensation=False) -> Tensor:
    """Run the attention a single layer of the given kind performs."""
    if layer == GLOBAL:
        return global_attention(q, k, v, mask, positions=positions, alibi=alibi)
    if layer == LOCAL:
        if semantics == BLOCK_BANDED and kernel == "blockwise":
            return local_attention_blockwise(q, k, v, window, mask, positions=positions, alibi=alibi)
        return local_attention_naive(q, k, v, window, mask, semantics, positions=positions, alibi=alibi)
    if layer == GLOBAL_APPROX:
        return global_approx_attention(q, k, v, window, chunk, mask, positions=positions, alibi=alibi,
                                       logit_side_compensation=logit_side_compensation)
    raise ConfigError(f"unknown layer attention {layer!r}")
