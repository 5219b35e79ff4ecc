import csv
import io

import pytest
from hypothesis import given, settings, strategies as st

from lgattn.attention import GLOBAL, GLOBAL_APPROX, GROUP, LOCAL, SLIDING_WINDOW
from lgattn.complexity import (
    SWEEP_COLUMNS,
    CostModel,
    attn_cost,
    calibrated_macs,
    group_ratio_limit,
    measure_macs,
    other_cost,
    rows_to_csv,
    sweep,
    total_cost,
)
from lgattn.errors import ConfigError


def test_group_over_global_headline_ratio():
    m = CostModel(D=768, N=16384, W=512, L=4)
    assert attn_cost(GROUP, m) / attn_cost(GLOBAL, m) == 0.28125
    assert group_ratio_limit(4, 512, 16384) == 0.28125


def test_unit_constant_formulas_by_hand():
    m = CostModel(D=2, N=10, W=3, C=2, L=5)
    assert attn_cost(GLOBAL, m) == 200
    assert attn_cost(LOCAL, m) == 60
    assert attn_cost(GLOBAL_APPROX, m) == 50 + 60
    assert attn_cost(GROUP, m) == 40 + 60
    assert other_cost(m) == 40
    assert total_cost(GROUP, m) == 140
    assert attn_cost(LOCAL, m, local_width=6) == 120


def test_degenerate_group_is_global():
    m = CostModel(D=64, N=4096, W=0, L=1)
    assert attn_cost(GROUP, m) == attn_cost(GLOBAL, m) == 64 * 4096 ** 2


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 1024), st.integers(2, 100_000), st.integers(1, 1000), st.integers(2, 8))
def test_local_below_group_below_global(D, N, W, L):
    m = CostModel(D=D, N=N, W=W, L=L)
    if W < N * (1 - 1 / L):
        assert attn_cost(LOCAL, m) < attn_cost(GROUP, m) < attn_cost(GLOBAL, m)


@pytest.mark.parametrize("L", [2, 3, 4, 8])
def test_ratio_tends_to_inverse_group_size(L):
    W = 512
    m = CostModel(D=768, N=1000 * W, W=W, L=L)
    ratio = attn_cost(GROUP, m) / attn_cost(GLOBAL, m)
    assert abs(ratio - 1 / L) / (1 / L) < 0.01


def test_bad_cost_models():
    with pytest.raises(ConfigError):
        CostModel(D=0, N=4)
    with pytest.raises(ConfigError):
        CostModel(D=4, N=4, L=0)
    with pytest.raises(ConfigError):
        attn_cost("dilated", CostModel(D=4, N=4))
    with pytest.raises(ConfigError):
        sweep([])


def test_sweep_rows_and_csv():
    grid = [CostModel(D=64, N=n, W=16, C=4, L=2) for n in (512, 128, 256)]
    rows = sweep(grid)
    assert len(rows) == 12
    keys = [(r["kind"], r["N"]) for r in rows]
    assert keys == sorted(keys)
    for r in rows:
        if r["kind"] == GLOBAL:
            assert r["ratio_vs_global"] == 1.0
    parsed = list(csv.DictReader(io.StringIO(rows_to_csv(rows))))
    assert tuple(parsed[0].keys()) == SWEEP_COLUMNS
    assert len(parsed) == 12
    glob = [r for r in parsed if r["kind"] == GLOBAL]
    assert [int(r["attn_ops"]) for r in glob] == [64 * n * n for n in (128, 256, 512)]


def test_sweep_attention_cost_monotone_in_length():
    rows = sweep([CostModel(D=32, N=n, W=8, C=2, L=4) for n in (64, 128, 256, 512)])
    for kind in (GLOBAL, LOCAL, GLOBAL_APPROX, GROUP):
        costs = [r["attn_ops"] for r in rows if r["kind"] == kind]
        assert costs == sorted(costs) and len(set(costs)) == 4


# -- counted against calibrated ----------------------------------------------------

@pytest.mark.parametrize("kind", [GLOBAL, LOCAL, GLOBAL_APPROX, GROUP])
@pytest.mark.parametrize("N", [64, 256])
def test_measured_macs_within_ten_percent(kind, N):
    W, C, L, D = 8, 2, 2, 16
    got = measure_macs(kind, N, W=W, C=C, L=L, hidden=D)
    want = calibrated_macs(kind, CostModel(D=D, N=N, W=W, C=C, L=L))
    assert abs(got / want - 1) < 0.10


def test_measured_sliding_window_macs():
    got = measure_macs(LOCAL, 256, W=8, hidden=16, semantics=SLIDING_WINDOW)
    want = calibrated_macs(LOCAL, CostModel(D=16, N=256, W=8), semantics=SLIDING_WINDOW)
    assert abs(got / want - 1) < 0.10


def test_chunk_term_scales_with_inverse_chunk_not_its_square():
    # Dividing the chunk size by two roughly doubles the summary work; an inverse-square law would quadruple it.
    D, N, W = 16, 512, 8
    local = calibrated_macs(LOCAL, CostModel(D=D, N=N, W=W), semantics=SLIDING_WINDOW)
    c4 = measure_macs(GLOBAL_APPROX, N, W=W, C=4, hidden=D) - local
    c2 = measure_macs(GLOBAL_APPROX, N, W=W, C=2, hidden=D) - local
    assert 1.8 < c2 / c4 < 2.2
