import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from heartvit.analysis import (LayerReport, aligned_tokens, cls_cosine, layer_report, linear_cka,
                               residual_ratio)
from heartvit.errors import ContractError, DegenerateInputError
from heartvit.model import ActivationCache, GateSet, forward


def random_matrix(seed, rows=20, cols=6):
    return np.random.default_rng(seed).standard_normal((rows, cols))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_cka_identities(seed):
    X = random_matrix(seed)
    Y = random_matrix(seed + 1, cols=4)
    Q, _ = np.linalg.qr(np.random.default_rng(seed + 2).standard_normal((6, 6)))
    assert linear_cka(X, X) == pytest.approx(1.0, abs=1e-12)
    assert linear_cka(X, X @ Q) == pytest.approx(1.0, abs=1e-12)
    assert linear_cka(X, -3.5 * X) == pytest.approx(1.0, abs=1e-12)
    assert abs(linear_cka(X, Y) - linear_cka(Y, X)) <= 1e-12
    assert 0.0 <= linear_cka(X, Y) <= 1.0


def test_cka_centers_columns():
    X = random_matrix(0)
    assert linear_cka(X + 100.0, X) == pytest.approx(1.0, abs=1e-12)


def test_cka_independent_columns_is_small():
    X = random_matrix(1, rows=2000, cols=2)
    Y = random_matrix(2, rows=2000, cols=2)
    assert linear_cka(X, Y) < 0.01


def test_cka_errors():
    X = random_matrix(0)
    with pytest.raises(DegenerateInputError):
        linear_cka(np.ones((5, 3)), X[:5])
    with pytest.raises(ContractError):
        linear_cka(X, X[:-1])
    with pytest.raises(ContractError):
        linear_cka(X[:, 0], X[:, 0])


def cache_of(tokens, inputs=None):
    """Hand-built dense cache from per-layer ``(B, n, d)`` outputs."""
    n = tokens[0].shape[1]
    return ActivationCache(inputs=list(inputs if inputs is not None else tokens), tokens=list(tokens),
                           positions=[np.arange(n)] * len(tokens))


def test_cls_cosine_signs():
    T = [random_matrix(3, rows=4 * 5, cols=8).reshape(4, 5, 8)]
    assert cls_cosine(cache_of(T), cache_of(T), 0) == pytest.approx(1.0, abs=1e-12)
    assert cls_cosine(cache_of(T), cache_of([-t for t in T]), 0) == pytest.approx(-1.0, abs=1e-12)


def test_cls_cosine_zero_norm():
    T = [np.zeros((2, 3, 4))]
    with pytest.raises(DegenerateInputError):
        cls_cosine(cache_of(T), cache_of(T), 0)


def test_residual_ratio_hand_values():
    ins = [np.full((1, 2, 4), 1.0)]
    outs = [np.full((1, 2, 4), 2.0)]
    assert residual_ratio(cache_of(outs, ins), 0) == pytest.approx(0.5)
    with pytest.raises(DegenerateInputError):
        residual_ratio(cache_of([np.zeros((1, 2, 4))], ins), 0)


def zeroed_block(model, layer):
    params = dict(model.params)
    for name in ("wo", "bo", "fc2.w", "fc2.b"):
        key = f"blocks.{layer}.{name}"
        params[key] = np.zeros_like(params[key])
    return model.with_params(params)


def test_zeroed_block_has_unit_residual_ratio(tiny_model, images):
    x = images(tiny_model.config, 3, seed=1)
    _, cache = forward(zeroed_block(tiny_model, 2), x)
    assert residual_ratio(cache, 2) == 1.0
    assert residual_ratio(cache, 1) > 0


def test_zeroed_block_under_compact_gates(tiny_model, images):
    cfg = tiny_model.config
    x = images(cfg, 2, seed=2)
    tok = np.ones((2, cfg.layers, cfg.tokens))
    tok[0, :, 3:7] = 0
    tok[1, :, 9:] = 0
    head = np.ones((2, cfg.layers, cfg.heads))
    head[:, :, 1] = 0
    _, cache = forward(zeroed_block(tiny_model, 0), x, GateSet(tok, head), mode="compact")
    assert residual_ratio(cache, 0) == 1.0


def test_dense_vs_dense_is_identity(tiny_model, images):
    x = images(tiny_model.config, 4, seed=3)
    _, a = forward(tiny_model, x)
    _, b = forward(tiny_model, x)
    rep = layer_report(a, b)
    assert len(rep.cka) == tiny_model.config.layers
    np.testing.assert_allclose(rep.cka, 1.0, atol=1e-12)
    np.testing.assert_allclose(rep.cls_cosine, 1.0, atol=1e-12)
    assert all(r > 0 for r in rep.residual_ratio)


def test_dense_vs_pruned_report(tiny_model, images):
    cfg = tiny_model.config
    x = images(cfg, 4, seed=4)
    rng = np.random.default_rng(0)
    tok = np.ones((4, cfg.layers, cfg.tokens))
    for b in range(4):
        tok[b, :, 1 + rng.choice(cfg.tokens - 1, 8, replace=False)] = 0
    head = np.ones((4, cfg.layers, cfg.heads))
    head[:, :, :2] = 0
    _, dense = forward(tiny_model, x)
    _, pruned = forward(tiny_model, x, GateSet(tok, head), mode="compact")
    rep = layer_report(dense, pruned)
    assert all(np.isfinite(v) for col in (rep.cka, rep.cls_cosine, rep.residual_ratio) for v in col)
    X, Y = aligned_tokens(dense, pruned, 0)
    assert X.shape == Y.shape == (4 * 9, cfg.hidden_dim)


def test_layer_report_checks_ranges():
    with pytest.raises(ContractError):
        LayerReport([1.5], [1.0], [1.0])
    with pytest.raises(ContractError):
        LayerReport([1.0], [-1.5], [1.0])
    with pytest.raises(ContractError):
        LayerReport([1.0], [1.0], [0.0])
    with pytest.raises(ContractError):
        LayerReport([1.0, 1.0], [1.0], [1.0])


def test_layer_report_csv():
    text = LayerReport([1.0, 0.5], [1.0, 0.25], [0.9, 0.8]).to_csv()
    lines = text.splitlines()
    assert lines[0] == "# activations: post-block"
    assert lines[1] == "layer,cka,cls_cosine,residual_ratio"
    assert lines[3] == "1,0.5,0.25,0.8"


@pytest.mark.slow
def test_trained_model_pruned_report(end_to_end):
    from heartvit.pipeline import infer_pruned_batch
    from heartvit.policy import PruningPolicy
    model = end_to_end.model
    L = model.config.layers
    ordered = 0
    for seed in range(10):
        idx = np.sort(np.random.default_rng(seed).choice(len(end_to_end.test), 16, replace=False))
        x = end_to_end.test.images[idx]
        _, dense = forward(model, x)
        out = infer_pruned_batch(model, x, PruningPolicy("percentile", 0.5, 0.5), keep_cache=True)
        rep = layer_report(dense, out.cache)
        assert len(rep.cka) == L
        assert all(np.isfinite(v) for col in (rep.cka, rep.cls_cosine, rep.residual_ratio) for v in col)
        ordered += rep.cls_cosine[0] >= rep.cls_cosine[-1]
    assert ordered >= 7
