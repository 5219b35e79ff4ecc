"""Closed-form attention cost model and its check against instrumented kernels.

``attn_cost`` gives leading-order operation counts with unit constants.
``calibrated_macs`` gives the count a real kernel performs: 2 MACs per
admissible (query, key) pair per channel (score plus context), and causal
masking halves the dense term.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from lgattn.attention import (
    ATTN_KINDS,
    BLOCK_BANDED,
    GLOBAL,
    GLOBAL_APPROX,
    GROUP,
    LOCAL,
    count_attention_ops,
)
from lgattn.errors import ConfigError

SWEEP_COLUMNS = ("kind", "N", "attn_ops", "total_ops", "ratio_vs_global", "attn_ops_block_banded")


@dataclass(frozen=True)
class CostModel:
    D: int
    N: int
    W: float = 0
    C: int = 1
    L: int = 1
    other: float = 1.0  # coefficient of the D^2 N non-attention term

    def __post_init__(self):
        if self.D < 1 or self.N < 1:
            raise ConfigError(f"D and N must be >= 1, got D={self.D}, N={self.N}")
        if self.W < 0 or self.C < 1 or self.L < 1 or self.other < 0:
            raise ConfigError(f"need W >= 0, C >= 1, L >= 1, other >= 0; got {self}")


def attn_cost(kind: str, m: CostModel, local_width: float | None = None) -> float:
    """Leading-order attention cost; ``local_width`` replaces W (2W for two-block coverage)."""
    D, N, W = m.D, m.N, m.W if local_width is None else local_width
    if kind == GLOBAL:
        return D * N * N
    if kind == LOCAL:
        return D * W * N
    if kind == GLOBAL_APPROX:
        return D / m.C ** 2 * N * N + D * W * N
    if kind == GROUP:
        return D / m.L * N * N + D * W * N
    raise ConfigError(f"unknown attention kind {kind!r}", key="attn")


def other_cost(m: CostModel) -> float:
    return m.other * m.D * m.D * m.N


def total_cost(kind: str, m: CostModel) -> float:
    return attn_cost(kind, m) + other_cost(m)


def calibrated_macs(kind: str, m: CostModel, semantics: str = BLOCK_BANDED) -> float:
    """Per-layer MACs a causal kernel performs, to leading order.

    Dense causal: 2 D * N^2 / 2. Sliding window: 2 D W N. Block-banded: the
    previous block (W keys) plus on average half the own block, so 3 D W N.
    Chunk approximation: query i sees about (i - W) / C summaries, giving
    D (N - W)^2 / C, plus the window and the leftover partial chunk,
    2 D (W + (C - 1) / 2) N.
    """
    D, N, W = m.D, m.N, m.W
    local = (3.0 if semantics == BLOCK_BANDED else 2.0) * D * W * N
    if kind == GLOBAL:
        return D * N * N
    if kind == LOCAL:
        return local
    if kind == GLOBAL_APPROX:
        return D * max(N - W, 0) ** 2 / m.C + D * (2 * W + m.C - 1) * N
    if kind == GROUP:
        return D * N * N / m.L + (1 - 1 / m.L) * local
    raise ConfigError(f"unknown attention kind {kind!r}", key="attn")


def measure_macs(kind: str, N: int, W: int = 8, C: int = 2, L: int = 2, hidden: int = 16, n_heads: int = 2,
                 n_layers: int | None = None, semantics: str = BLOCK_BANDED, seed: int = 0) -> float:
    """Per-layer attention MACs counted during a real forward pass of a small model."""
    from lgattn.model import ModelConfig, forward, init_weights
    from lgattn.numerics import no_grad

    n_layers = n_layers or (L if kind == GROUP else 1)
    cfg = ModelConfig(n_layers=n_layers, hidden_size=hidden, n_heads=n_heads, head_dim=hidden // n_heads,
                      ff_hidden=2 * hidden, vocab_size=11, max_seq_len=N, attn=kind,
                      window=None if kind == GLOBAL else W, chunk=C if kind == GLOBAL_APPROX else None,
                      group_size=L if kind == GROUP else None, local_semantics=semantics, seed=seed)
    tokens = np.random.default_rng(seed).integers(0, 11, size=(1, N))
    with no_grad(), count_attention_ops() as counter:
        forward(init_weights(cfg), tokens)
    return counter.total / n_layers


def sweep(grid: Iterable[CostModel], kinds: Iterable[str] = ATTN_KINDS) -> list[dict]:
    """One row per (kind, grid point), sorted by (kind, N)."""
    grid = list(grid)
    if not grid:
        raise ConfigError("sweep needs a nonempty grid")
    rows = []
    for kind in kinds:
        for m in grid:
            rows.append({
                "kind": kind,
                "N": m.N,
                "attn_ops": attn_cost(kind, m),
                "total_ops": total_cost(kind, m),
                "ratio_vs_global": total_cost(kind, m) / total_cost(GLOBAL, m),
                "attn_ops_block_banded": attn_cost(kind, m, local_width=2 * m.W),
            })
    rows.sort(key=lambda r: (r["kind"], r["N"]))
    return rows


def _fmt(x) -> str:
    if isinstance(x, float):
        return str(int(x)) if x.is_integer() and abs(x) < 1e18 else repr(x)
    return str(x)


def rows_to_csv(rows: list[dict], columns=SWEEP_COLUMNS) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for r in rows:
        writer.writerow([_fmt(r[c]) for c in columns])
    return buf.getvalue()


def group_ratio_limit(L: int, W: float, N: float) -> float:
    """Group/global attention ratio from the unit-constant formulas: 1/L + W/N."""
    return 1.0 / L + W / N

