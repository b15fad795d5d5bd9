"""Intermediate feature fusion: (H_SV, H_S) -> fused vector z.

Widths: Concat, Gating and FiLM emit 2d; AP and TE emit d. All pooling
respects the frame masks, so padded frames never change an output.
Concatenation order follows each method's definition: Concat and Gating put
the vowel half first, FiLM puts the sentence half first.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndcore as nd
from .backbone import FrameFeatures
from .ndcore import Parameter, ShapeError, Tensor
from .nn import EncoderLayer, Module

METHODS = ("concat", "ap", "gating", "film", "te")


@dataclass
class FusedRepresentation:
    z: Tensor
    method: str

    @property
    def width(self) -> int:
        return self.z.shape[-1]


def _as_features(H, mask=None, source: str = "mixed") -> FrameFeatures:
    if isinstance(H, FrameFeatures):
        return H
    H = nd.as_tensor(H)
    return FrameFeatures(H, mask, source)


def _check_pair(a: FrameFeatures, b: FrameFeatures) -> None:
    if a.d != b.d:
        raise ShapeError(f"feature widths differ: {a.d} vs {b.d}")
    if a.H.shape[0] != b.H.shape[0]:
        raise ShapeError(f"batch sizes differ: {a.H.shape[0]} vs {b.H.shape[0]}")


def avg_pool(H, mask=None) -> Tensor:
    """Masked mean over time: (B, T, d) -> (B, d)."""
    f = _as_features(H, mask)
    counts = f.mask.sum(axis=1, keepdims=True).astype(np.float64)
    if f.T == 0 or (counts == 0).any():
        raise ValueError("average pooling of an empty sequence")
    return (f.H * f.mask[..., None].astype(np.float64)).sum(axis=1) / counts


class AttentionPool(Module):
    """Softmax-over-time weights from a learnable scoring vector ``w``."""

    def __init__(self, d: int):
        self.w = Parameter(np.zeros(d))

    def __call__(self, H, mask=None) -> Tensor:
        return attention_pool(H, self, mask)


def attention_pool(H, p: AttentionPool, mask=None) -> Tensor:
    f = _as_features(H, mask)
    if p.w.shape != (f.d,):
        raise ShapeError(f"scoring vector of length {p.w.shape[0]} for width {f.d}")
    if f.T == 0 or not f.mask.any(axis=1).all():
        raise ValueError("attention pooling over a fully masked sequence")
    B, T, d = f.H.shape
    logits = nd.matmul(f.H, p.w.reshape(d, 1)).reshape(B, T)
    alpha = nd.softmax(logits, axis=-1, mask=f.mask)
    return (f.H * alpha.reshape(B, T, 1)).sum(axis=1)


def time_concat(a: FrameFeatures, b: FrameFeatures) -> FrameFeatures:
    """[a; b] along the time axis with the masks carried along."""
    _check_pair(a, b)
    H = nd.concat([a.H, b.H], axis=1)
    return FrameFeatures(H, np.concatenate([a.mask, b.mask], axis=1), "mixed")


class ConcatFusion(Module):
    method = "concat"

    def __init__(self, d: int):
        self.d = d

    def width(self) -> int:
        return 2 * self.d

    def __call__(self, h_sv: FrameFeatures, h_s: FrameFeatures) -> FusedRepresentation:
        _check_pair(h_sv, h_s)
        return FusedRepresentation(nd.concat([avg_pool(h_sv), avg_pool(h_s)], axis=-1), self.method)


class APFusion(Module):
    method = "ap"

    def __init__(self, d: int):
        self.d = d
        self.pool = AttentionPool(d)

    def width(self) -> int:
        return self.d

    def __call__(self, h_sv: FrameFeatures, h_s: FrameFeatures) -> FusedRepresentation:
        return FusedRepresentation(self.pool(time_concat(h_sv, h_s)), self.method)


class GatingFusion(Module):
    method = "gating"

    def __init__(self, d: int, rng: np.random.Generator):
        self.d = d
        self.pool_sv = AttentionPool(d)
        self.pool_s = AttentionPool(d)
        self.W = Parameter(rng.normal(0.0, 0.02, size=(2 * d, 2 * d)))
        self.b = Parameter(np.zeros(2 * d))

    def width(self) -> int:
        return 2 * self.d

    def __call__(self, h_sv: FrameFeatures, h_s: FrameFeatures) -> FusedRepresentation:
        _check_pair(h_sv, h_s)
        c = nd.concat([self.pool_sv(h_sv), self.pool_s(h_s)], axis=-1)
        gate = nd.sigmoid(nd.linear(c, self.W, self.b))
        return FusedRepresentation(gate * c, self.method)


class FiLMFusion(Module):
    method = "film"

    def __init__(self, d: int, rng: np.random.Generator):
        self.d = d
        self.pool_sv = AttentionPool(d)
        self.pool_s = AttentionPool(d)
        init = lambda: Parameter(rng.normal(0.0, 0.02, size=(d, d)))  # noqa: E731
        self.W_gamma_s = init()
        self.W_beta_s = init()
        self.W_gamma_v = init()
        self.W_beta_v = init()

    def width(self) -> int:
        return 2 * self.d

    def __call__(self, h_sv: FrameFeatures, h_s: FrameFeatures) -> FusedRepresentation:
        _check_pair(h_sv, h_s)
        z_sv = self.pool_sv(h_sv)
        z_s = self.pool_s(h_s)
        film_s = z_s * (1.0 + nd.linear(z_sv, self.W_gamma_s)) + nd.linear(z_sv, self.W_beta_s)
        film_sv = z_sv * (1.0 + nd.linear(z_s, self.W_gamma_v)) + nd.linear(z_s, self.W_beta_v)
        return FusedRepresentation(nd.concat([film_s, film_sv], axis=-1), self.method)


@dataclass
class TEFusionConfig:
    num_layers: int = 2
    num_heads: int = 4
    ff_mult: int = 4
    norm_first: bool = True

    def __post_init__(self):
        if self.num_layers < 0:
            raise ValueError("num_layers must be >= 0")


class TEFusion(Module):
    """Transformer layers over the time-concatenated pair, then attention pooling.

    No positional or source embedding is added: backbone features already
    carry position information.
    """

    method = "te"

    def __init__(self, d: int, cfg: TEFusionConfig, rng: np.random.Generator):
        self.d = d
        res = 1.0 / np.sqrt(2.0 * max(cfg.num_layers, 1)) if cfg.norm_first else 1.0
        self.layers = [
            EncoderLayer(d, cfg.num_heads, cfg.ff_mult, rng, residual_scale=res, norm_first=cfg.norm_first)
            for _ in range(cfg.num_layers)
        ]
        self.pool = AttentionPool(d)

    def width(self) -> int:
        return self.d

    def __call__(self, h_sv: FrameFeatures, h_s: FrameFeatures) -> FusedRepresentation:
        combined = time_concat(h_sv, h_s)
        h = combined.H
        for layer in self.layers:
            h = layer(h, combined.mask)
        return FusedRepresentation(self.pool(h, combined.mask), self.method)


def concat_fusion(h_sv, h_s) -> FusedRepresentation:
    a, b = _as_features(h_sv), _as_features(h_s)
    return ConcatFusion(a.d)(a, b)


def make_fusion(method: str, d: int, rng: np.random.Generator, te_cfg: TEFusionConfig | None = None) -> Module:
    if method == "concat":
        return ConcatFusion(d)
    if method == "ap":
        return APFusion(d)
    if method == "gating":
        return GatingFusion(d, rng)
    if method == "film":
        return FiLMFusion(d, rng)
    if method == "te":
        return TEFusion(d, te_cfg or TEFusionConfig(), rng)
    raise ValueError(f"unknown fusion method {method!r}; expected one of {METHODS}")
