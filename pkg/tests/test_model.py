import numpy as np
import pytest

from heartvit import autodiff as ad
from heartvit.errors import ConfigError, ContractError, GateError
from heartvit.model import (TINY, VIT_B16, GateSet, ViTConfig, ViTModel, forward, init_model, loss,
                            param_shapes, patchify, predict)


def test_config_geometry():
    assert (TINY.tokens, TINY.head_dim, TINY.ffn_dim) == (17, 16, 256)
    assert (VIT_B16.tokens, VIT_B16.head_dim) == (197, 64)
    assert ViTConfig.from_text(TINY.to_text()) == TINY


@pytest.mark.parametrize("kw", [dict(image_size=30), dict(hidden_dim=66), dict(layers=0), dict(droppath_rate=1.0)])
def test_config_rejects_bad_geometry(kw):
    with pytest.raises(ConfigError):
        ViTConfig(**kw)


def test_registry_is_closed(tiny_model):
    params = dict(tiny_model.params)
    params["extra"] = np.zeros(1)
    with pytest.raises(ConfigError):
        ViTModel(TINY, params)
    params.pop("extra")
    params["cls"] = np.zeros(3)
    with pytest.raises(ConfigError):
        ViTModel(TINY, params)


def test_init_is_deterministic():
    a, b = init_model(TINY, 5), init_model(TINY, 5)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in param_shapes(TINY))


def test_patchify_order():
    img = np.arange(2 * 4 * 4, dtype=float).reshape(1, 2, 4, 4)
    p = patchify(img, 2)
    # second patch is the top-right 2x2 block of each channel
    np.testing.assert_array_equal(p[0, 1], [2, 3, 6, 7, 18, 19, 22, 23])


def test_dense_equals_all_ones_gates(tiny_model, images):
    x = images(TINY, 3)
    dense, _ = forward(tiny_model, x)
    ones, _ = forward(tiny_model, x, GateSet.ones(TINY))
    np.testing.assert_array_equal(dense, ones)
    compact, _ = forward(tiny_model, x, GateSet.ones(TINY), mode="compact")
    np.testing.assert_allclose(compact, dense, rtol=1e-12, atol=1e-12)


def test_pruned_token_does_not_influence_others(tiny_model, images):
    x = images(TINY, 1)
    keep = np.ones(TINY.tokens)
    keep[5] = 0
    g = GateSet.from_masks(TINY, keep, np.ones((TINY.layers, TINY.heads)))
    base, _ = forward(tiny_model, x, g)
    y = x.copy()
    y[0, :, 8:16, 0:8] += 10.0  # patch (1, 0) is token 5
    moved, _ = forward(tiny_model, y, g)
    np.testing.assert_allclose(moved, base, rtol=1e-12, atol=1e-12)


def test_head_gate_zero_matches_zeroed_projection(tiny_model, images):
    x = images(TINY, 2)
    head = np.ones((TINY.layers, TINY.heads))
    head[1, 2] = 0
    gated, _ = forward(tiny_model, x, GateSet.from_masks(TINY, np.ones(TINY.tokens), head))
    p = {k: v.copy() for k, v in tiny_model.params.items()}
    dk = TINY.head_dim
    p["blocks.1.wo"][2 * dk:3 * dk] = 0.0
    manual, _ = forward(tiny_model.with_params(p), x)
    np.testing.assert_allclose(gated, manual, rtol=1e-12, atol=1e-12)


def test_gate_validation(tiny_model, images):
    x = images(TINY, 2)
    tok = np.ones((TINY.layers, TINY.tokens))
    tok[0, 0] = 0
    with pytest.raises(GateError):
        forward(tiny_model, x, GateSet(tok, np.ones((TINY.layers, TINY.heads))))
    with pytest.raises(GateError):
        forward(tiny_model, x, GateSet(np.full((4, 17), 0.5), np.ones((4, 4))))
    with pytest.raises(GateError):
        forward(tiny_model, x, GateSet(np.ones((3, 4, 17)), np.ones((3, 4, 4))))
    with pytest.raises(ContractError):
        forward(tiny_model, x, GateSet(np.ones((4, 17)), np.ones((4, 4)), soft=True), mode="compact")


def test_compact_rejects_revived_tokens(tiny_model, images):
    tok = np.ones((TINY.layers, TINY.tokens))
    tok[1, 3] = 0
    with pytest.raises(GateError):
        forward(tiny_model, images(TINY, 1), GateSet(tok, np.ones((4, 4))), mode="compact")


def test_per_input_gates_match_separate_runs(tiny_model, images):
    x = images(TINY, 3)
    r = np.random.default_rng(1)
    tok = (r.random((3, TINY.layers, TINY.tokens)) > 0.3).astype(float)
    tok[..., 0] = 1
    tok = np.minimum.accumulate(tok, axis=1)
    head = (r.random((3, TINY.layers, TINY.heads)) > 0.3).astype(float)
    g = GateSet(tok, head)
    both, _ = forward(tiny_model, x, g)
    for b in range(3):
        one, _ = forward(tiny_model, x[b:b + 1], g.example(b))
        np.testing.assert_allclose(both[b], one[0], rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(predict(tiny_model, x, g, "compact"), both, rtol=1e-9, atol=1e-12)


def test_predict_chunks(tiny_model, images):
    x = images(TINY, 5)
    np.testing.assert_allclose(predict(tiny_model, x, chunk=2), forward(tiny_model, x)[0], rtol=1e-12, atol=1e-15)


def test_soft_gate_gradients(tiny_model, images):
    x = images(TINY, 2)
    labels = np.array([1, 3])
    tok0 = np.full((2, TINY.layers, TINY.tokens), 0.7)
    tok0[..., 0] = 1.0
    head0 = np.full((2, TINY.layers, TINY.heads), 0.6)

    def f(t, h):
        logits, _ = forward(tiny_model, x, GateSet(t, h, soft=True), record=False)
        return loss(logits, labels)

    _, (gt, gh) = ad.value_and_grad(f, [tok0, head0])
    eps = 1e-6
    for idx in [(0, 1, 4), (1, 2, 9)]:
        tp, tm = tok0.copy(), tok0.copy()
        tp[idx] += eps
        tm[idx] -= eps
        num = (ad.value_of(f(tp, head0)) - ad.value_of(f(tm, head0))) / (2 * eps)
        assert gt[idx] == pytest.approx(num, rel=1e-5, abs=1e-9)
    hp, hm = head0.copy(), head0.copy()
    hp[1, 3, 2] += eps
    hm[1, 3, 2] -= eps
    num = (ad.value_of(f(tok0, hp)) - ad.value_of(f(tok0, hm))) / (2 * eps)
    assert gh[1, 3, 2] == pytest.approx(num, rel=1e-5, abs=1e-9)


def test_droppath_needs_rng(images):
    cfg = ViTConfig(droppath_rate=0.1)
    m = init_model(cfg, 0)
    with pytest.raises(ContractError):
        forward(m, images(cfg, 1), train=True)
    a, _ = forward(m, images(cfg, 1), train=True, rng=ad.make_rng(0))
    b, _ = forward(m, images(cfg, 1))
    assert a.shape == b.shape


def test_batch_shape_checked(tiny_model):
    with pytest.raises(ContractError):
        forward(tiny_model, np.zeros((1, 3, 16, 16)))
