"""Self-checks comparing each fast path against its reference, runnable from the CLI."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from lgattn import attention as at
from lgattn.inference import DecodeSession, decode_step, prefill
from lgattn.model import ModelConfig, forward, init_weights
from lgattn.numerics import Tensor, cross_entropy, grad_check, softmax_masked
from lgattn.posenc import AlibiParams, RopeParams, alibi_bias, rope_angles, rope_rotate


@dataclass
class CheckResult:
    suite: str
    name: str
    max_diff: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.max_diff < self.tolerance)


def _qkv(rng, n, batch=(2,), heads=2, hd=4):
    return tuple(Tensor(rng.normal(size=batch + (n, heads, hd))) for _ in range(3))


def _small(attn="global", pos_emb="rope", **kw) -> ModelConfig:
    return ModelConfig(n_layers=2, hidden_size=16, n_heads=2, head_dim=8, ff_hidden=32, vocab_size=11,
                       max_seq_len=64, attn=attn, pos_emb=pos_emb, seed=3, **kw)


def check_blockwise() -> list[CheckResult]:
    rng = np.random.default_rng(0)
    worst = 0.0
    for w in (1, 4, 16):
        for n in (1, w, w + 1, 2 * w + 1, 7 * w + 3):
            q, k, v = _qkv(rng, n)
            mask = rng.random((2, n, n)) < 0.8
            mask[:, np.arange(n), np.arange(n)] = True
            fast = at.local_attention_blockwise(q, k, v, w, mask).data
            ref = at.local_attention_naive(q, k, v, w, mask, semantics=at.BLOCK_BANDED).data
            worst = max(worst, float(np.max(np.abs(fast - ref))))
    return [CheckResult("blockwise", "blockwise_vs_naive", worst, 1e-12)]


def check_approx() -> list[CheckResult]:
    rng = np.random.default_rng(1)
    worst = 0.0
    for n in (8, 40, 100):
        q, k, v = _qkv(rng, n)
        worst = max(worst, float(np.max(np.abs(at.global_approx_attention(q, k, v, 8, 1).data
                                               - at.global_attention(q, k, v).data))))
    return [CheckResult("approx", "approx_c1_vs_global", worst, 1e-10)]


def check_group() -> list[CheckResult]:
    tokens = np.random.default_rng(2).integers(0, 11, size=(2, 20))
    ref_w = init_weights(_small(), np.float64)
    ref = forward(ref_w, tokens).data
    out = []
    for name, cfg in (("group_L1_vs_global", _small("group", window=4, group_size=1)),
                      ("group_wide_window_vs_global", _small("group", window=32, group_size=4))):
        w = init_weights(cfg, np.float64)
        w.params = ref_w.params
        out.append(CheckResult("group", name, float(np.max(np.abs(forward(w, tokens).data - ref))), 1e-10))
    return out


def check_rope() -> list[CheckResult]:
    rng = np.random.default_rng(3)
    params = RopeParams(16)
    worst = 0.0
    for s in (1, 100, 4096):
        for _ in range(20):
            q, k = (Tensor(rng.normal(size=(1, 1, 16))) for _ in range(2))
            i, j = rng.integers(0, 1024, size=2)
            a = np.sum(rope_rotate(q, [i], params).data * rope_rotate(k, [j], params).data)
            b = np.sum(rope_rotate(q, [i + s], params).data * rope_rotate(k, [j + s], params).data)
            worst = max(worst, abs(float(a - b)))
    pos = np.arange(0, 10000, 3, dtype=np.float64)
    same = np.array_equal(rope_angles(pos, RopeParams(32, scale=4.0)), rope_angles(pos / 4, RopeParams(32)))
    return [CheckResult("rope", "rope_shift_invariance", worst, 1e-6),
            CheckResult("rope", "rope_scale_bit_exact", 0.0 if same else np.inf, 1e-300)]


def check_alibi() -> list[CheckResult]:
    rng = np.random.default_rng(4)
    params = AlibiParams(4)
    n = 12
    logits = rng.normal(size=(4, n, n))
    causal = np.tril(np.ones((n, n), dtype=bool))
    base = softmax_masked(Tensor(logits + alibi_bias(params, np.arange(n), np.arange(n))), causal).data
    worst = 0.0
    for s in (1, 100, 4096):
        pos = np.arange(n) + s
        moved = softmax_masked(Tensor(logits + alibi_bias(params, pos, pos)), causal).data
        worst = max(worst, float(np.max(np.abs(moved - base))))
    return [CheckResult("alibi", "alibi_shift_invariance", worst, 1e-12)]


def check_cache() -> list[CheckResult]:
    out = []
    tokens = np.random.default_rng(5).integers(0, 11, size=16)
    kinds = {"global": {}, "local": dict(window=4), "group": dict(window=4, group_size=2),
             "global_approx": dict(window=4, chunk=2)}
    for attn, kw in kinds.items():
        w = init_weights(_small(attn, **kw), np.float64)
        session = DecodeSession(w)
        worst = 0.0
        logits = prefill(session, tokens[:1])
        for t in range(1, len(tokens) + 1):
            full = forward(w, tokens[None, :t], local_semantics=at.SLIDING_WINDOW).data[0, -1]
            worst = max(worst, float(np.max(np.abs(logits - full))))
            if t < len(tokens):
                logits = decode_step(session, tokens[t])
        out.append(CheckResult("cache", f"cache_vs_full_{attn}", worst, 1e-10))
    return out


def check_grad() -> list[CheckResult]:
    out = []
    tokens = np.random.default_rng(6).integers(0, 11, size=(1, 9))
    # window 2 keeps the local layer narrower than the 8 scored positions
    for attn, kw in (("global", {}), ("group", dict(window=2, group_size=2))):
        w = init_weights(_small(attn, **kw), np.float64)

        def loss():
            return cross_entropy(forward(w, tokens[:, :-1]), tokens[:, 1:])

        report = grad_check(loss, w.parameters(), names=w.names(), max_entries=6)
        out.append(CheckResult("grad", f"grad_check_{attn}", report.max_rel_error, 1e-4))
    return out


SUITES: dict[str, Callable[[], list[CheckResult]]] = {
    "blockwise": check_blockwise,
    "approx": check_approx,
    "group": check_group,
    "rope": check_rope,
    "alibi": check_alibi,
    "cache": check_cache,
    "grad": check_grad,
}


def run_checks(suites=None) -> list[CheckResult]:
    names = list(SUITES) if not suites else list(suites)
    unknown = [s for s in names if s not in SUITES]
    if unknown:
        from lgattn.errors import ConfigError
        raise ConfigError(f"unknown check suite(s) {unknown}; choose from {list(SUITES)}", key="suite")
    results = []
    for name in names:
        results += SUITES[name]()
    return results
