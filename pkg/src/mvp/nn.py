"""Parameter containers and transformer building blocks on top of ndcore."""

from __future__ import annotations

import math

import numpy as np

from . import ndcore as nd
from .ndcore import Parameter, Tensor


class Module:
    """Container that discovers Parameters and sub-Modules from attributes."""

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        if missing:
            raise KeyError(f"state is missing parameters: {sorted(missing)}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise nd.ShapeError(f"{name}: stored shape {arr.shape} != {p.shape}")
            p.data[...] = arr


def _normal(rng: np.random.Generator, shape, std: float) -> Parameter:
    return Parameter(rng.normal(0.0, std, size=shape))


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True, std=None):
        self.weight = _normal(rng, (n_out, n_in), 1.0 / math.sqrt(n_in) if std is None else std)
        self.bias = Parameter(np.zeros(n_out)) if bias else None

    def __call__(self, x) -> Tensor:
        return nd.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gain = Parameter(np.ones(d))
        self.shift = Parameter(np.zeros(d))
        self.eps = eps

    def __call__(self, x) -> Tensor:
        return nd.layer_norm(x, self.gain, self.shift, self.eps)


class MultiHeadSelfAttention(Module):
    def __init__(self, d: int, num_heads: int, rng: np.random.Generator, out_scale: float = 1.0):
        if d % num_heads:
            raise ValueError(f"width {d} not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.qkv = Linear(d, 3 * d, rng)
        self.out = Linear(d, d, rng, std=out_scale / math.sqrt(d))

    def __call__(self, x: Tensor, mask: np.ndarray | None) -> Tensor:
        B, T, d = x.shape
        h = self.num_heads
        dh = d // h
        qkv = self.qkv(x).reshape(B, T, 3, h, dh).transpose(2, 0, 3, 1, 4)  # (3,B,h,T,dh)
        q, k, v = qkv[0] * (1.0 / math.sqrt(dh)), qkv[1], qkv[2]
        ctx = nd.attention(q, k, v, mask).transpose(0, 2, 1, 3).reshape(B, T, d)
        return self.out(ctx)


class EncoderLayer(Module):
    """Transformer encoder layer, pre-norm by default.

    ``residual_scale`` shrinks the init of both branch output projections so a
    deep stack starts close to the identity map. With ``norm_first=False`` the
    layer normalises after each residual sum instead (post-norm).
    """

    def __init__(
        self,
        d: int,
        num_heads: int,
        ff_mult: int,
        rng: np.random.Generator,
        residual_scale: float = 1.0,
        norm_first: bool = True,
    ):
        self.norm_first = norm_first
        self.norm1 = LayerNorm(d)
        self.attn = MultiHeadSelfAttention(d, num_heads, rng, out_scale=residual_scale)
        self.norm2 = LayerNorm(d)
        self.ff1 = Linear(d, ff_mult * d, rng)
        self.ff2 = Linear(ff_mult * d, d, rng, std=residual_scale / math.sqrt(ff_mult * d))

    def __call__(self, x: Tensor, mask: np.ndarray | None) -> Tensor:
        if self.norm_first:
            x = x + self.attn(self.norm1(x), mask)
            return x + self.ff2(nd.gelu(self.ff1(self.norm2(x))))
        x = self.norm1(x + self.attn(x, mask))
        return self.norm2(x + self.ff2(nd.gelu(self.ff1(x))))


def sinusoidal_positions(T: int, d: int) -> np.ndarray:
    pos = np.arange(T)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
