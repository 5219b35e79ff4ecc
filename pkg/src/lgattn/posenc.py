"""Positional schemes: absolute (sinusoidal or learned), ALiBi biases, rotary embedding."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from lgattn.errors import ConfigError, ExtrapolationError, ShapeError
from lgattn.numerics import Tensor, add, concat, mul, sub

DEFAULT_ROPE_THETA = 131072.0


# -- absolute ------------------------------------------------------------------

def sinusoidal_pe(pos: int, d: int) -> np.ndarray:
    """Vector with sin at even components and cos at odd ones, frequency 10000^(-2i/d)."""
    return sinusoidal_table(pos + 1, d)[pos]


def sinusoidal_table(n: int, d: int) -> np.ndarray:
    if d % 2:
        raise ConfigError(f"sinusoidal embedding needs an even dimension, got {d}", key="hidden_size")
    pos = np.arange(n, dtype=np.float64)[:, None]
    i = np.arange(d // 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2 * i / d)
    table = np.empty((n, d))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle)
    return table


def add_absolute(word_emb: Tensor, pe_table: Tensor, offset: int = 0) -> Tensor:
    """Add rows ``offset .. offset+n-1`` of the position table to ``word_emb[..., n, d]``."""
    n, d = word_emb.shape[-2:]
    if pe_table.shape[-1] != d:
        raise ShapeError(f"position table width {pe_table.shape[-1]} != embedding width {d}")
    if offset + n > pe_table.shape[0]:
        raise ExtrapolationError(
            f"absolute positions only cover 0..{pe_table.shape[0] - 1}; asked for up to {offset + n - 1}"
        )
    return add(word_emb, pe_table[offset:offset + n])


# -- ALiBi ---------------------------------------------------------------------

def alibi_slopes(n_heads: int) -> np.ndarray:
    """Geometric slopes 2^(-8h/n_heads), h = 1..n_heads."""
    h = np.arange(1, n_heads + 1, dtype=np.float64)
    return np.power(2.0, -8.0 * h / n_heads)


@dataclass(frozen=True)
class AlibiParams:
    n_heads: int
    slopes: np.ndarray = field(default=None, compare=False)  # type: ignore[assignment]

    def __post_init__(self):
        if self.n_heads < 1:
            raise ConfigError("n_heads must be positive", key="n_heads")
        if self.slopes is None:
            object.__setattr__(self, "slopes", alibi_slopes(self.n_heads))
        slopes = np.asarray(self.slopes, dtype=np.float64)
        if slopes.shape != (self.n_heads,):
            raise ConfigError(f"expected {self.n_heads} slopes, got {slopes.shape}")
        if np.any(slopes <= 0) or np.any(np.diff(slopes) >= 0):
            raise ConfigError("ALiBi slopes must be positive and strictly decreasing")
        object.__setattr__(self, "slopes", slopes)


def alibi_bias(params: AlibiParams, q_positions, k_positions) -> np.ndarray:
    """bias[..., h, i, j] = -(q_pos[i] - k_pos[j]) * m_h.

    Position arrays may carry matching leading axes (e.g. per block). Only
    j <= i is ever consumed; causal masking happens downstream.
    """
    q = np.asarray(q_positions, dtype=np.float64)
    k = np.asarray(k_positions, dtype=np.float64)
    dist = q[..., :, None] - k[..., None, :]
    return -dist[..., None, :, :] * params.slopes[:, None, None]


# -- rotary --------------------------------------------------------------------

@dataclass(frozen=True)
class RopeParams:
    head_dim: int
    theta: float = DEFAULT_ROPE_THETA
    scale: float = 1.0

    def __post_init__(self):
        if self.head_dim < 2 or self.head_dim % 2:
            raise ConfigError(f"rotary embedding needs an even head_dim, got {self.head_dim}", key="head_dim")
        if self.theta <= 0:
            raise ConfigError("rope_theta must be positive", key="rope_theta")
        if self.scale < 1:
            raise ConfigError("rope_scale must be >= 1", key="rope_scale")

    def inv_freq(self) -> np.ndarray:
        i = np.arange(self.head_dim // 2, dtype=np.float64)
        return np.power(float(self.theta), -2.0 * i / self.head_dim)


def rope_angles(positions, params: RopeParams) -> np.ndarray:
    """Angles [n, head_dim/2]: (p / scale) * theta^(-2i/head_dim)."""
    p = np.asarray(positions, dtype=np.float64) / params.scale
    return p[..., None] * params.inv_freq()


def rope_rotate(x: Tensor, positions, params: RopeParams) -> Tensor:
    """Rotate dimension pairs (d, d + head_dim/2) of ``x[..., n, heads, head_dim]``.

    ``positions`` has length n (absolute, possibly offset for cached decoding).
    """
    hd = x.shape[-1]
    if hd != params.head_dim:
        raise ShapeError(f"x head_dim {hd} != rope head_dim {params.head_dim}")
    half = hd // 2
    ang = rope_angles(positions, params)
    if ang.shape[-2] != x.shape[-3]:
        raise ShapeError(f"{ang.shape[-2]} positions for sequence length {x.shape[-3]}")
    cos = np.cos(ang)[..., :, None, :].astype(x.dtype)
    sin = np.sin(ang)[..., :, None, :].astype(x.dtype)
    x1 = x[..., :half]
    x2 = x[..., half:]
    return concat([sub(mul(x1, cos), mul(x2, sin)), add(mul(x1, sin), mul(x2, cos))], axis=-1)
