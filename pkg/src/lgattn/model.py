"""Decoder-only transformer with a per-layer attention schedule.

Pre-norm residual blocks (LayerNorm, attention, LayerNorm, tanh-GELU
feed-forward), a tied output head and no dropout. Weights live in a flat
name -> Tensor dict so the optimizer and checkpoint code can walk them.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from lgattn import kvtext
from lgattn.attention import (
    BLOCK_BANDED,
    GLOBAL,
    LOCAL_SEMANTICS,
    AttnKind,
    apply_layer_attention,
    qkv_project,
)
from lgattn.errors import ConfigError, ShapeError
from lgattn.numerics import (
    Tensor,
    add,
    embedding,
    gelu,
    layer_norm,
    matmul,
    reshape,
    swapaxes,
)
from lgattn.posenc import (
    DEFAULT_ROPE_THETA,
    AlibiParams,
    RopeParams,
    add_absolute,
    rope_rotate,
    sinusoidal_table,
)

BOS = 256
EOS = 257
BYTE_VOCAB = 258

POS_EMBS = ("rope", "alibi", "absolute")
INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    hidden_size: int = 128
    n_heads: int = 4
    head_dim: int = 32
    ff_hidden: int = 512
    vocab_size: int = BYTE_VOCAB
    max_seq_len: int = 256
    attn: str = GLOBAL
    window: int | None = None
    chunk: int | None = None
    group_size: int | None = None
    local_semantics: str = BLOCK_BANDED
    logit_side_compensation: bool = False
    pos_emb: str = "rope"
    rope_theta: float = DEFAULT_ROPE_THETA
    rope_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for name in ("n_layers", "hidden_size", "n_heads", "head_dim", "ff_hidden", "vocab_size", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"must be >= 1, got {getattr(self, name)}", key=name)
        if self.hidden_size != self.n_heads * self.head_dim:
            raise ConfigError(
                f"hidden_size {self.hidden_size} != n_heads {self.n_heads} * head_dim {self.head_dim}",
                key="hidden_size")
        if self.ff_hidden <= self.hidden_size:
            raise ConfigError(f"ff_hidden {self.ff_hidden} must exceed hidden_size {self.hidden_size}",
                              key="ff_hidden")
        if self.pos_emb not in POS_EMBS:
            raise ConfigError(f"unknown positional embedding {self.pos_emb!r}; expected one of {POS_EMBS}",
                              key="pos_emb")
        if self.local_semantics not in LOCAL_SEMANTICS:
            raise ConfigError(f"unknown local semantics {self.local_semantics!r}", key="local_semantics")
        if self.pos_emb == "rope":
            self.rope()  # validates theta / scale / head_dim parity
        if self.pos_emb == "absolute" and self.hidden_size % 2:
            raise ConfigError("absolute position table needs an even hidden_size", key="hidden_size")
        self.kind()

    def kind(self) -> AttnKind:
        return AttnKind(self.attn, self.window, self.chunk, self.group_size)

    def layer_kinds(self) -> list[str]:
        return self.kind().layer_kinds(self.n_layers)

    def rope(self) -> RopeParams | None:
        if self.pos_emb != "rope":
            return None
        return RopeParams(self.head_dim, self.rope_theta, self.rope_scale)

    def alibi(self) -> AlibiParams | None:
        return AlibiParams(self.n_heads) if self.pos_emb == "alibi" else None

    def to_text(self) -> str:
        return kvtext.to_text(dataclasses.asdict(self))

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        return kvtext.from_text(cls, text)

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class TransformerWeights:
    config: ModelConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def names(self) -> list[str]:
        return list(self.params)

    def layer(self, l: int) -> dict[str, Tensor]:
        prefix = f"layers.{l}."
        return {k[len(prefix):]: v for k, v in self.params.items() if k.startswith(prefix)}

    def copy(self) -> "TransformerWeights":
        return TransformerWeights(self.config, {k: Tensor(v.data.copy()) for k, v in self.params.items()})


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every parameter's shape, in canonical order."""
    d, ff = config.hidden_size, config.ff_hidden
    shapes: dict[str, tuple[int, ...]] = {"embed": (config.vocab_size, d)}
    if config.pos_emb == "absolute":
        shapes["pos_table"] = (config.max_seq_len, d)
    for l in range(config.n_layers):
        p = f"layers.{l}."
        shapes.update({
            p + "ln1.gain": (d,), p + "ln1.bias": (d,),
            p + "attn.wq": (d, d), p + "attn.wk": (d, d), p + "attn.wv": (d, d), p + "attn.wo": (d, d),
            p + "ln2.gain": (d,), p + "ln2.bias": (d,),
            p + "ff.w_in": (d, ff), p + "ff.b_in": (ff,),
            p + "ff.w_out": (ff, d), p + "ff.b_out": (d,),
        })
    shapes["final_norm.gain"] = (d,)
    shapes["final_norm.bias"] = (d,)
    return shapes


def init_weights(config: ModelConfig, dtype=np.float32) -> TransformerWeights:
    rng = np.random.default_rng(config.seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if name == "pos_table":
            arr = sinusoidal_table(*shape)
        elif name.endswith("gain"):
            arr = np.ones(shape)
        elif len(shape) == 1:
            arr = np.zeros(shape)
        else:
            arr = rng.normal(0.0, INIT_STD, size=shape)
        params[name] = Tensor(arr.astype(dtype), name=name)
    return TransformerWeights(config, params)


def param_count(config: ModelConfig, include_embeddings: bool = True) -> int:
    total = 0
    for name, shape in param_shapes(config).items():
        if not include_embeddings and name in ("embed", "pos_table"):
            continue
        total += int(np.prod(shape))
    return total


def attention_mask(pad_mask, n: int) -> np.ndarray | None:
    """``[batch, 1, n, n]`` key-validity mask; every query keeps its own key."""
    if pad_mask is None:
        return None
    pad_mask = np.asarray(pad_mask, dtype=bool)
    if pad_mask.shape[-1] != n:
        raise ShapeError(f"pad_mask length {pad_mask.shape[-1]} != sequence length {n}")
    return pad_mask[..., None, None, :] | np.eye(n, dtype=bool)


def embed_tokens(weights: TransformerWeights, tokens, start_pos: int = 0) -> Tensor:
    x = embedding(weights["embed"], tokens)
    if weights.config.pos_emb == "absolute":
        x = add_absolute(x, weights["pos_table"], offset=start_pos)
    return x


def project_qkv(weights: TransformerWeights, l: int, x: Tensor, positions) -> tuple[Tensor, Tensor, Tensor]:
    """Pre-norm and project the residual stream; RoPE is applied here when enabled."""
    cfg = weights.config
    p = weights.layer(l)
    h = layer_norm(x, p["ln1.gain"], p["ln1.bias"])
    q, k, v = qkv_project(h, p["attn.wq"], p["attn.wk"], p["attn.wv"], cfg.n_heads)
    rope = cfg.rope()
    if rope is not None:
        q = rope_rotate(q, positions, rope)
        k = rope_rotate(k, positions, rope)
    return q, k, v


def finish_block(weights: TransformerWeights, l: int, x: Tensor, ctx: Tensor) -> Tensor:
    """Output projection, residual add, then the feed-forward half of the block."""
    p = weights.layer(l)
    merged = reshape(ctx, ctx.shape[:-2] + (weights.config.hidden_size,))
    x = add(x, matmul(merged, p["attn.wo"]))
    h = layer_norm(x, p["ln2.gain"], p["ln2.bias"])
    h = gelu(add(matmul(h, p["ff.w_in"]), p["ff.b_in"]))
    return add(x, add(matmul(h, p["ff.w_out"]), p["ff.b_out"]))


def output_logits(weights: TransformerWeights, x: Tensor) -> Tensor:
    h = layer_norm(x, weights["final_norm.gain"], weights["final_norm.bias"])
    return matmul(h, swapaxes(weights["embed"], 0, 1))


def forward(weights: TransformerWeights, tokens, pad_mask=None, *, start_pos: int = 0,
            local_semantics: str | None = None, kernel: str = "blockwise", return_kv: bool = False):
    """Logits ``[batch, n, vocab]`` for integer ``tokens[batch, n]``.

    ``pad_mask`` marks real tokens; padded keys are hidden from other queries.
    ``local_semantics`` overrides the config (inference uses the sliding
    window). With ``return_kv`` also returns each layer's (post-RoPE) keys
    and values.
    """
    cfg = weights.config
    tokens = np.asarray(tokens)
    if tokens.ndim < 1:
        raise ShapeError("tokens need at least one axis")
    n = tokens.shape[-1]
    positions = start_pos + np.arange(n)
    mask = attention_mask(pad_mask, n)
    semantics = local_semantics or cfg.local_semantics
    alibi = cfg.alibi()

    x = embed_tokens(weights, tokens, start_pos)
    kv = []
    for l, kind in enumerate(cfg.layer_kinds()):
        q, k, v = project_qkv(weights, l, x, positions)
        if return_kv:
            kv.append((k, v))
        ctx = apply_layer_attention(kind, q, k, v, window=cfg.window, chunk=cfg.chunk, semantics=semantics,
                                    kernel=kernel, mask=mask, positions=positions, alibi=alibi,
                                    logit_side_compensation=cfg.logit_side_compensation)
        x = finish_block(weights, l, x, ctx)
    logits = output_logits(weights, x)
    return (logits, kv) if return_kv else logits
