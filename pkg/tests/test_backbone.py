import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mvp import ndcore as nd
from mvp.backbone import Backbone, BackboneConfig, LayerWeights, extract

SMALL = dict(d=8, num_layers=2, num_heads=2, n_bands=8, extraction="last")


def test_default_framing_of_five_seconds():
    assert BackboneConfig().num_frames(80000) == 249
    assert BackboneConfig().num_frames(160000) == 499


def test_config_validation():
    with pytest.raises(ValueError):
        BackboneConfig(d=10, num_heads=4)
    with pytest.raises(ValueError):
        BackboneConfig(frame_stride_ms=0)
    with pytest.raises(ValueError):
        BackboneConfig(num_layers=4, extraction=5)
    assert BackboneConfig(num_layers=4, extraction="last").extraction == 4


def test_encode_shapes_and_taps(rng):
    cfg = BackboneConfig(**SMALL)
    x = rng.normal(size=(2, 4000))
    f = Backbone(cfg, 1).encode(x, [4000, 2000])
    T = cfg.num_frames(4000)
    assert f.H.shape == (2, T, 8)
    assert len(f.per_layer) == cfg.num_layers + 1
    assert all(t.shape == (2, T, 8) for t in f.per_layer)
    assert f.mask[1].sum() == cfg.num_frames(2000)
    assert np.isfinite(f.H.data).all()
    np.testing.assert_array_equal(f.H.data[1, ~f.mask[1]], 0.0)


def test_encode_rejects_short_input(rng):
    bb = Backbone(BackboneConfig(**SMALL), 0)
    with pytest.raises(ValueError):
        bb.encode(rng.normal(size=(1, 399)), [399])


def test_frozen_backbone_gets_no_gradient(rng):
    bb = Backbone(BackboneConfig(**SMALL, frozen=True), 0)
    f = bb.encode(rng.normal(size=(1, 3000)), [3000])
    w = nd.Parameter(np.ones(8))
    nd.backward((f.H * w).sum())
    assert all(p.grad is None or not p.grad.any() for p in bb.parameters())
    assert w.grad is not None and w.grad.any()


def test_seeds_give_distinct_parameters_same_shapes(rng):
    cfg = BackboneConfig(**SMALL)
    a, b = Backbone(cfg, 1), Backbone(cfg, 2)
    x = rng.normal(size=(1, 3000))
    assert any(not np.array_equal(p.data, q.data) for p, q in zip(a.parameters(), b.parameters()))
    assert a.encode(x, [3000]).H.shape == b.encode(x, [3000]).H.shape


def test_encode_deterministic_and_padding_invariant(rng):
    cfg = BackboneConfig(**SMALL)
    x = rng.normal(size=3000)
    f1 = Backbone(cfg, 5).encode(x[None], [3000])
    f2 = Backbone(cfg, 5).encode(x[None], [3000])
    assert f1.H.data.tobytes() == f2.H.data.tobytes()
    padded = np.concatenate([x, np.zeros(2000)])[None]
    f3 = Backbone(cfg, 5).encode(padded, [3000], trim=False)
    np.testing.assert_allclose(f3.H.data[:, : f1.T], f1.H.data, atol=1e-9)


@given(st.integers(400, 6000))
def test_width_constant_and_frames_linear_in_duration(n):
    cfg = BackboneConfig(**SMALL)
    assert cfg.num_frames(n) == (n - 400) // 320 + 1
    assert cfg.num_frames(n + 320) == cfg.num_frames(n) + 1


def test_extract_examples():
    ones, zeros = np.ones((1, 3, 2)), np.zeros((1, 3, 2))
    w = LayerWeights(2)
    np.testing.assert_array_equal(extract([ones, zeros], "weighted", w).data, np.full((1, 3, 2), 0.5))
    rng = np.random.default_rng(0)
    layers = [rng.normal(size=(1, 3, 2)) for _ in range(9)]
    w = LayerWeights(9)
    w.logits.data[5] = 100.0
    np.testing.assert_allclose(extract(layers, "weighted", w).data, layers[5], atol=1e-6)
    cfg = BackboneConfig(num_layers=8, extraction="last")
    np.testing.assert_array_equal(extract(layers, cfg.extraction).data, layers[8])
    with pytest.raises(IndexError):
        extract(layers, 9)
    with pytest.raises(ValueError):
        extract([], 0)


def test_weighted_extract_is_differentiable(rng):
    layers = [nd.Tensor(rng.normal(size=(2, 3, 4))) for _ in range(3)]
    w = LayerWeights(3)
    w.logits.data[:] = rng.normal(size=3)
    target = rng.normal(size=(2, 3, 4))
    assert nd.grad_check(lambda: (extract(layers, "weighted", w) * target).sum(), [w.logits]) < 1e-7


def test_backbone_gradient(rng):
    cfg = BackboneConfig(d=4, num_layers=1, num_heads=2, n_bands=4, frame_win_ms=2.0, frame_stride_ms=1.0, extraction=1)
    bb = Backbone(cfg, 3)
    x = rng.normal(size=(1, 200))
    target = rng.normal(size=(1, cfg.num_frames(200), 4))
    params = bb.layers[0].parameters()
    assert nd.grad_check(lambda: (bb.encode(x, [200]).H * target).sum(), params) < 1e-5
