import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mvp import ndcore as nd
from mvp.backbone import FrameFeatures
from mvp.fusion import (
    APFusion,
    AttentionPool,
    ConcatFusion,
    FiLMFusion,
    GatingFusion,
    TEFusion,
    TEFusionConfig,
    attention_pool,
    avg_pool,
    concat_fusion,
    make_fusion,
    time_concat,
)
from mvp.ndcore import ShapeError, Tensor

from conftest import random_features


def feats(H, mask=None, source="sentence"):
    return FrameFeatures(Tensor(np.asarray(H, dtype=float)), mask, source)


def test_avg_pool_examples():
    np.testing.assert_array_equal(avg_pool(feats([[1.0, 2.0, 3.0]])).data, [[1.0, 2.0, 3.0]])
    np.testing.assert_array_equal(avg_pool(feats([[0.0, 0.0], [2.0, 4.0]])).data, [[1.0, 2.0]])
    np.testing.assert_array_equal(avg_pool(feats([[7.0, -1.0]] * 5)).data, [[7.0, -1.0]])
    with pytest.raises(ValueError):
        avg_pool(feats(np.zeros((1, 0, 2))))


def test_concat_fusion_examples(rng):
    z = concat_fusion(feats([[2.0]]), feats([[5.0]]))
    np.testing.assert_array_equal(z.z.data, [[2.0, 5.0]])
    assert z.method == "concat"
    a, b = random_features(rng, 2, 4, 3), random_features(rng, 2, 5, 3)
    ab, ba = concat_fusion(a, b).z.data, concat_fusion(b, a).z.data
    assert ab.shape == (2, 6)
    np.testing.assert_array_equal(ab[:, :3], ba[:, 3:])
    with pytest.raises(ShapeError):
        concat_fusion(a, random_features(rng, 2, 4, 4))


def test_attention_pool_examples(rng):
    f = random_features(rng, 3, 6, 4)
    np.testing.assert_allclose(AttentionPool(4)(f).data, avg_pool(f).data, atol=1e-12)
    single = feats([[0.5, -2.0]])
    p = AttentionPool(2)
    p.w.data[:] = [3.0, 1.0]
    np.testing.assert_array_equal(p(single).data, [[0.5, -2.0]])
    p = AttentionPool(1)
    p.w.data[:] = 1.0
    z = p(feats([[0.0], [1.0]])).item()
    assert z == pytest.approx(math.e / (1 + math.e), abs=1e-15)
    assert z == pytest.approx(0.7311, abs=1e-4)
    with pytest.raises(ValueError):
        p(feats([[1.0], [2.0]], mask=np.zeros((1, 2), bool)))
    with pytest.raises(ShapeError):
        attention_pool(f, AttentionPool(3))


def test_gating_examples(rng):
    h_sv, h_s = random_features(rng, 2, 5, 3), random_features(rng, 2, 7, 3)
    g = GatingFusion(3, rng)
    c = nd.concat([g.pool_sv(h_sv), g.pool_s(h_s)], axis=-1).data
    g.W.data[:] = 0.0
    assert np.array_equal(g(h_sv, h_s).z.data, 0.5 * c)
    g.b.data[:] = -100.0
    z = g(h_sv, h_s).z.data
    assert np.all(np.abs(z) <= (1 + 1e-12) * np.abs(c) / (1.0 + math.exp(100.0)))
    g = GatingFusion(3, rng)
    g.b.data[:] = rng.normal(size=6)
    assert nd.grad_check(lambda: g(h_sv, h_s).z.sum(), [g.W]) < 1e-5


def test_film_examples(rng):
    h_sv, h_s = random_features(rng, 2, 5, 3), random_features(rng, 2, 4, 3)
    f = FiLMFusion(3, rng)
    for W in (f.W_gamma_s, f.W_beta_s, f.W_gamma_v, f.W_beta_v):
        W.data[:] = 0.0
    expected = np.concatenate([f.pool_s(h_s).data, f.pool_sv(h_sv).data], axis=-1)
    assert np.array_equal(f(h_sv, h_s).z.data, expected)
    f1 = FiLMFusion(1, rng)
    f1.W_gamma_s.data[:] = 1.0
    f1.W_beta_s.data[:] = 0.0
    z = f1(feats([[3.0]]), feats([[2.0]])).z.data
    assert z[0, 0] == pytest.approx(8.0, abs=1e-12)
    f = FiLMFusion(3, rng)
    params = [f.W_gamma_s, f.W_beta_s, f.W_gamma_v, f.W_beta_v]
    for p in params:
        p.data[:] = rng.normal(0, 0.5, size=p.shape)
    assert nd.grad_check(lambda: (f(h_sv, h_s).z ** 2).sum(), params) < 1e-5


def test_te_examples(rng):
    h_sv, h_s = random_features(rng, 2, 5, 4), random_features(rng, 2, 3, 4)
    te0 = TEFusion(4, TEFusionConfig(num_layers=0, num_heads=2), rng)
    te0.pool.w.data[:] = rng.normal(size=4)
    ap = APFusion(4)
    ap.pool.w.data[:] = te0.pool.w.data
    assert np.array_equal(te0(h_sv, h_s).z.data, ap(h_sv, h_s).z.data)
    assert time_concat(random_features(rng, 1, 249, 4), random_features(rng, 1, 249, 4)).T == 498
    te = TEFusion(4, TEFusionConfig(num_layers=2, num_heads=2), rng)
    te.pool.w.data[:] = rng.normal(size=4)
    w = rng.normal(size=4)
    assert nd.grad_check(lambda: (te(h_sv, h_s).z * w).sum(), te.parameters()) < 1e-4
    with pytest.raises(ShapeError):
        te(h_sv, random_features(rng, 2, 3, 2))


def test_te_post_norm_variant_runs(rng):
    te = TEFusion(4, TEFusionConfig(num_layers=1, num_heads=2, norm_first=False), rng)
    z = te(random_features(rng, 2, 3, 4), random_features(rng, 2, 2, 4)).z
    assert z.shape == (2, 4) and np.isfinite(z.data).all()


@pytest.mark.parametrize("d", [1, 2, 64])
def test_width_contract(d, rng):
    h_sv, h_s = random_features(rng, 2, 3, d), random_features(rng, 2, 4, d)
    heads = 1 if d < 4 else 4
    for m in ("concat", "ap", "gating", "film", "te"):
        f = make_fusion(m, d, rng, TEFusionConfig(num_heads=heads))
        z = f(h_sv, h_s)
        assert z.width == f.width() == (d if m in ("ap", "te") else 2 * d)
        assert z.method == m and np.isfinite(z.z.data).all()
    with pytest.raises(ValueError):
        make_fusion("sum", d, rng)


@given(st.integers(0, 2**16), st.integers(1, 5), st.integers(1, 5), st.integers(0, 4), st.integers(0, 4))
def test_masked_padding_leaves_every_fusion_unchanged(seed, t_sv, t_s, pad_sv, pad_s):
    rng = np.random.default_rng(seed)
    d = 4
    a, b = rng.normal(size=(1, t_sv, d)), rng.normal(size=(1, t_s, d))

    def padded(x, n):
        H = np.concatenate([x, rng.normal(size=(1, n, d)) * 0.0 + 7.0], axis=1)
        return feats(H, mask=np.arange(H.shape[1])[None] < x.shape[1])

    for m in ("concat", "ap", "gating", "film", "te"):
        f = make_fusion(m, d, np.random.default_rng(seed), TEFusionConfig(num_heads=2))
        for p in f.parameters():
            p.data[:] = np.random.default_rng(seed + 1).normal(size=p.shape) * 0.3
        ref = f(feats(a), feats(b)).z.data
        out = f(padded(a, pad_sv), padded(b, pad_s)).z.data
        np.testing.assert_allclose(out, ref, atol=1e-9, rtol=0)


def test_every_fusion_parameter_gets_finite_gradient(rng):
    h_sv, h_s = random_features(rng, 4, 5, 8), random_features(rng, 4, 6, 8)
    y = np.array([0, 1, 1, 0])
    for m in ("ap", "gating", "film", "te"):
        f = make_fusion(m, 8, rng, TEFusionConfig(num_heads=2))
        z = f(h_sv, h_s).z
        w = nd.Parameter(rng.normal(size=(1, f.width())))
        nd.backward(nd.bce_with_logits(nd.linear(z, w).reshape(4), y))
        for name, p in f.named_parameters():
            assert p.grad is not None and np.isfinite(p.grad).all(), (m, name)


def test_concat_has_no_parameters():
    assert ConcatFusion(8).parameters() == []
