import numpy as np
import pytest

from lgattn.errors import ConfigError, ExtrapolationError
from lgattn.numerics import Tensor, softmax_masked
from lgattn.posenc import (
    AlibiParams,
    RopeParams,
    add_absolute,
    alibi_bias,
    alibi_slopes,
    rope_angles,
    rope_rotate,
    sinusoidal_pe,
    sinusoidal_table,
)


def test_sinusoid_at_zero():
    pe = sinusoidal_pe(0, 8)
    assert np.all(pe[0::2] == 0.0)
    assert np.all(pe[1::2] == 1.0)


def test_sinusoid_first_pair_at_one():
    pe = sinusoidal_pe(1, 8)
    assert pe[0] == pytest.approx(0.84147, abs=1e-5)
    assert pe[1] == pytest.approx(0.54030, abs=1e-5)


def test_sinusoid_pairs_on_unit_circle():
    table = sinusoidal_table(500, 16)
    np.testing.assert_allclose(table[:, 0::2] ** 2 + table[:, 1::2] ** 2, 1.0, atol=1e-12)


def test_sinusoid_rejects_odd_dimension():
    with pytest.raises(ConfigError):
        sinusoidal_pe(3, 7)


def test_add_absolute_identities_and_oracle():
    rng = np.random.default_rng(0)
    table = Tensor(rng.normal(size=(10, 8)))
    zero_words = Tensor(np.zeros((4, 8)))
    np.testing.assert_array_equal(add_absolute(zero_words, table).data, table.data[:4])
    words = Tensor(rng.normal(size=(4, 8)))
    np.testing.assert_array_equal(add_absolute(words, Tensor(np.zeros((10, 8)))).data, words.data)
    out = add_absolute(words, table).data
    for i in range(4):
        for j in range(8):
            assert out[i, j] == words.data[i, j] + table.data[i, j]


def test_add_absolute_refuses_to_extrapolate():
    with pytest.raises(ExtrapolationError):
        add_absolute(Tensor(np.zeros((5, 4))), Tensor(np.zeros((4, 4))))


# -- ALiBi ---------------------------------------------------------------------

def test_alibi_slopes_geometric_and_decreasing():
    s = alibi_slopes(8)
    np.testing.assert_allclose(s, [2.0 ** (-h) for h in range(1, 9)])
    assert np.all(np.diff(s) < 0)


def test_alibi_zero_on_diagonal():
    bias = alibi_bias(AlibiParams(4), np.arange(6), np.arange(6))
    assert bias.shape == (4, 6, 6)
    assert np.all(np.diagonal(bias, axis1=1, axis2=2) == 0.0)


def test_alibi_forced_value():
    params = AlibiParams(1, slopes=np.array([0.5]))
    assert alibi_bias(params, [4], [1])[0, 0, 0] == -1.5


def test_alibi_shift_leaves_causal_softmax_unchanged():
    rng = np.random.default_rng(1)
    params = AlibiParams(4)
    n = 9
    logits = rng.normal(size=(4, n, n))
    causal = np.tril(np.ones((n, n), dtype=bool))
    base = softmax_masked(Tensor(logits + alibi_bias(params, np.arange(n), np.arange(n))), causal).data
    for s in (1, 17, 1000):
        pos = np.arange(n) + s
        shifted = softmax_masked(Tensor(logits + alibi_bias(params, pos, pos)), causal).data
        assert np.max(np.abs(shifted - base)) < 1e-12


def test_alibi_row_constant_form_matches():
    # +j*m differs from -(i-j)*m by a per-row constant, so probabilities agree
    params = AlibiParams(2)
    n = 6
    rng = np.random.default_rng(2)
    logits = rng.normal(size=(2, n, n))
    causal = np.tril(np.ones((n, n), dtype=bool))
    j_form = np.arange(n)[None, None, :] * params.slopes[:, None, None] + np.zeros((2, n, n))
    a = softmax_masked(Tensor(logits + alibi_bias(params, np.arange(n), np.arange(n))), causal).data
    b = softmax_masked(Tensor(logits + j_form), causal).data
    assert np.max(np.abs(a - b)) < 1e-12


def test_alibi_rejects_bad_slopes():
    with pytest.raises(ConfigError):
        AlibiParams(2, slopes=np.array([0.25, 0.5]))


# -- RoPE ----------------------------------------------------------------------

def test_rope_identity_at_position_zero():
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(size=(1, 2, 8)))
    out = rope_rotate(x, [0], RopeParams(8))
    np.testing.assert_array_equal(out.data, x.data)


def test_rope_preserves_pair_norms():
    rng = np.random.default_rng(4)
    x = Tensor(rng.normal(size=(5, 3, 8)))
    out = rope_rotate(x, np.arange(5) * 37, RopeParams(8)).data
    half = 4
    before = x.data[..., :half] ** 2 + x.data[..., half:] ** 2
    after = out[..., :half] ** 2 + out[..., half:] ** 2
    np.testing.assert_allclose(after, before, atol=1e-12)


def test_rope_logits_depend_only_on_relative_position():
    rng = np.random.default_rng(5)
    params = RopeParams(16)
    worst = 0.0
    for _ in range(100):
        q = Tensor(rng.normal(size=(1, 1, 16)))
        k = Tensor(rng.normal(size=(1, 1, 16)))
        i, j = rng.integers(0, 2048, size=2)
        s = int(rng.integers(1, 4097))
        base = float(np.sum(rope_rotate(q, [i], params).data * rope_rotate(k, [j], params).data))
        moved = float(np.sum(rope_rotate(q, [i + s], params).data * rope_rotate(k, [j + s], params).data))
        worst = max(worst, abs(base - moved))
    assert worst < 1e-6


def test_rope_scale_is_position_division_bit_exact():
    positions = np.arange(0, 5000, 7, dtype=np.float64)
    scaled = rope_angles(positions, RopeParams(32, scale=4.0))
    plain = rope_angles(positions / 4.0, RopeParams(32, scale=1.0))
    assert np.array_equal(scaled, plain)


def test_rope_default_theta():
    assert RopeParams(64).theta == 131072


@pytest.mark.parametrize("kwargs", [dict(head_dim=7), dict(head_dim=8, theta=0.0), dict(head_dim=8, scale=0.5)])
def test_rope_param_validation(kwargs):
    with pytest.raises(ConfigError):
        RopeParams(**kwargs)
