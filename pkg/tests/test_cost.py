from fractions import Fraction

import pytest
from hypothesis import given, settings, strategies as st

from heartvit.cost import (REFERENCE_FLOPS_G, check_reference, kept_counts, layer_cost, model_cost,
                           parse_grid, reduction_table, table_csv, token_dominance)
from heartvit.errors import ConfigError
from heartvit.model import TINY, VIT_B16, ViTConfig

from oracles import quadratic_coefficients


def test_dense_layer_by_hand():
    n, d, dff = 197, 768, 3072
    expect = 3 * n * d * d + 2 * n * n * d + n * d * d + 2 * n * d * dff
    assert layer_cost(n, d, 12, 64, dff).total == expect == 1_453_954_560


def test_dense_vit_b16_total():
    rep = model_cost(VIT_B16)
    assert rep.total == 17_563_828_224
    assert rep.patch_embed == 196 * 768 * 768 and rep.classifier == 768 * 1000


def test_kept_counts_round_half_up():
    assert kept_counts(197, 12, Fraction(4, 5), Fraction(4, 5), "compact") == (158, 10)
    assert kept_counts(197, 12, Fraction(1, 2), 1, "masked") == (99, 12)
    assert kept_counts(17, 4, Fraction(1, 2), Fraction(1, 2), "compact") == (9, 2)
    with pytest.raises(ConfigError):
        kept_counts(17, 4, 1, Fraction(1, 10), "compact")
    with pytest.raises(ConfigError):
        kept_counts(17, 4, 0, 1, "compact")


def test_masked_mode_ignores_head_ratio():
    a = model_cost(VIT_B16, Fraction(4, 5), Fraction(1, 5), "masked")
    b = model_cost(VIT_B16, Fraction(4, 5), Fraction(4, 5), "masked")
    assert a.total == b.total == 13_996_185_600


def test_reduction_table_and_csv():
    dense, rows = reduction_table(VIT_B16, parse_grid("sym:40,20"))
    assert [r.tokens_pruned for r in rows] == [20, 40]
    text = table_csv(dense, rows)
    lines = text.splitlines()
    assert lines[0] == "tokens_pruned,heads_pruned,mode,flops,reduction_pct"
    assert lines[1] == "0,0,masked_heads,17563828224,0.00"
    assert lines[2] == "20,20,masked_heads,13996185600,20.31"
    assert lines[3] == "40,40,masked_heads,10484613120,40.31"


def test_reference_check():
    dense, rows = reduction_table(VIT_B16, [k for k in REFERENCE_FLOPS_G])
    assert check_reference(dense, rows) == []
    dense, rows = reduction_table(TINY, parse_grid("sym:20"))
    assert check_reference(dense, rows)


@pytest.mark.parametrize("text", ["", "sym", "sym:", "sym:20/80", "asym:20", "tri:20", "sym:abc", "sym:100",
                                  "asym:20/-5"])
def test_bad_grids(text):
    with pytest.raises(ConfigError):
        parse_grid(text)


def test_grid_forms():
    assert parse_grid("sym:20,40") == [(20.0, 20.0), (40.0, 40.0)]
    assert parse_grid("asym:20/80,40/60") == [(20.0, 80.0), (40.0, 60.0)]
    with pytest.raises(ConfigError):
        reduction_table(TINY, [])


def test_compact_heads_scale_linearly():
    c = [model_cost(VIT_B16, 1, Fraction(k, 12), "compact").total for k in (12, 9, 6)]
    assert c[0] - 2 * c[1] + c[2] == 0


def test_token_dominance_margin():
    dom = token_dominance()
    assert dom.d_alpha > dom.d_beta
    assert 0.6 < dom.ffn_share < 0.7
    assert dom.margin == pytest.approx(0.6518, abs=1e-4)


@settings(max_examples=40, deadline=None)
@given(st.sampled_from([1, 2, 4]), st.sampled_from([1, 2, 4]), st.sampled_from([8, 16]), st.integers(1, 3))
def test_unrounded_alpha_squared_coefficient(heads, patch_mul, dim, layers):
    cfg = ViTConfig(image_size=8 * patch_mul, patch_size=8, layers=layers, heads=heads, hidden_dim=dim * heads)
    alphas = [Fraction(1), Fraction(3, 5), Fraction(1, 5)]
    costs = [sum(l.total for l in model_cost(cfg, a, 1, "compact", rounded=False).layers) for a in alphas]
    _, _, c2 = quadratic_coefficients(alphas, costs)
    n, d = cfg.tokens, cfg.hidden_dim
    assert c2 == 2 * cfg.layers * (n - 1) ** 2 * d
