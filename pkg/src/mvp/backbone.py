"""Frame-level encoder standing in for a pretrained speech backbone.

waveform -> strided filterbank convolution -> log band energies -> context
projection (layer 0) -> ``num_layers`` pre-norm transformer layers. Every
layer output is a tap point; layer 0 is the front-end output, layers
1..num_layers the encoder blocks, so "5th layer" means index 5.

Frames whose analysis window reaches past ``valid_len`` are masked; masked
frames never influence valid ones, which lets callers trim padding freely.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndcore as nd
from .ndcore import Parameter, Tensor
from .nn import EncoderLayer, Linear, Module, sinusoidal_positions

SOURCES = ("vowel", "sentence", "mixed")


@dataclass
class BackboneConfig:
    d: int = 64
    num_layers: int = 8
    num_heads: int = 4
    ff_mult: int = 4
    frame_stride_ms: float = 20.0
    frame_win_ms: float = 25.0
    n_bands: int = 40
    sample_rate: int = 16000
    frozen: bool = False
    extraction: int | str = 5
    pos_scale: float = 1.0
    tap_norm: bool = False

    def __post_init__(self):
        if self.d % self.num_heads:
            raise ValueError(f"d={self.d} is not divisible by num_heads={self.num_heads}")
        if self.frame_stride_ms <= 0 or self.frame_win_ms <= 0:
            raise ValueError("frame stride and window must be positive")
        if isinstance(self.extraction, str):
            if self.extraction == "last":
                self.extraction = self.num_layers
            elif self.extraction != "weighted":
                self.extraction = int(self.extraction)
        if self.extraction != "weighted" and not 0 <= self.extraction <= self.num_layers:
            raise ValueError(f"layer index {self.extraction} outside [0, {self.num_layers}]")

    @property
    def hop(self) -> int:
        return int(round(self.frame_stride_ms * self.sample_rate / 1000))

    @property
    def win(self) -> int:
        return int(round(self.frame_win_ms * self.sample_rate / 1000))

    def num_frames(self, n_samples: int) -> int:
        if n_samples < self.win:
            return 0
        return (n_samples - self.win) // self.hop + 1


@dataclass
class FrameFeatures:
    """Batched frame features ``H`` (B, T, d) with a validity mask (B, T)."""

    H: Tensor
    mask: np.ndarray
    source: str
    per_layer: list[Tensor] | None = None

    def __post_init__(self):
        if self.H.ndim == 2:
            self.H = self.H.reshape(1, *self.H.shape)
        if self.mask is None:
            self.mask = np.ones(self.H.shape[:2], dtype=bool)
        self.mask = np.asarray(self.mask, dtype=bool).reshape(self.H.shape[:2])

    @property
    def T(self) -> int:
        return self.H.shape[1]

    @property
    def d(self) -> int:
        return self.H.shape[2]


def mel_centers(n: int, lo: float, hi: float) -> np.ndarray:
    mel = lambda f: 2595 * np.log10(1 + f / 700)  # noqa: E731
    inv = lambda m: 700 * (10 ** (m / 2595) - 1)  # noqa: E731
    return inv(np.linspace(mel(lo), mel(hi), n))


def cepstral_init(n_bands: int, d: int) -> np.ndarray:
    """Context-projection init: half static cepstra, half delta cepstra.

    Returns a (d, 3 * n_bands) matrix acting on ``[f(t-1), f(t), f(t+1)]``.
    """
    n_static = (d + 1) // 2
    n_delta = d - n_static
    k = np.arange(max(n_static, n_delta))[:, None]
    b = np.arange(n_bands)[None, :]
    dct = np.sqrt(2.0 / n_bands) * np.cos(np.pi * k * (b + 0.5) / n_bands)
    dct[0] /= np.sqrt(2.0)
    W = np.zeros((d, 3 * n_bands))
    W[:n_static, n_bands : 2 * n_bands] = dct[:n_static]
    W[n_static:, :n_bands] = -dct[:n_delta]
    W[n_static:, 2 * n_bands :] = dct[:n_delta]
    return W


class FrontEnd(Module):
    """Learnable strided filterbank (cos/sin pairs at mel-spaced centres) + log energy."""

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        win = np.hanning(cfg.win + 2)[1:-1]
        t = np.arange(cfg.win) / cfg.sample_rate
        fc = mel_centers(cfg.n_bands, 60.0, 0.45 * cfg.sample_rate)
        scale = 2.0 / win.sum()
        cos = np.cos(2 * np.pi * fc[:, None] * t[None, :]) * win * scale
        sin = np.sin(2 * np.pi * fc[:, None] * t[None, :]) * win * scale
        self.filters = Parameter(np.concatenate([cos, sin], axis=0))
        self.proj = Linear(3 * cfg.n_bands, cfg.d, rng, std=0.02 / np.sqrt(cfg.n_bands))
        self.proj.weight.data += cepstral_init(cfg.n_bands, cfg.d)
        self.cfg = cfg

    def __call__(self, frames: np.ndarray, mask: np.ndarray) -> Tensor:
        nb = self.cfg.n_bands
        r = nd.matmul(frames, nd.transpose(self.filters))
        energy = r[..., :nb] * r[..., :nb] + r[..., nb:] * r[..., nb:]
        feats = (nd.log(energy + 1e-4) + 2.0) * (0.25 * mask[..., None])
        B, T, _ = feats.shape
        zero = nd.Tensor(np.zeros((B, 1, nb)))
        prev = nd.concat([zero, feats[:, :-1]], axis=1)
        nxt = nd.concat([feats[:, 1:], zero], axis=1)
        return self.proj(nd.concat([prev, feats, nxt], axis=-1))


class Backbone(Module):
    def __init__(self, cfg: BackboneConfig, seed: int):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xBB]))
        self.cfg = cfg
        self.seed = seed
        self.front = FrontEnd(cfg, rng)
        res = 1.0 / np.sqrt(2.0 * max(cfg.num_layers, 1))
        self.layers = [
            EncoderLayer(cfg.d, cfg.num_heads, cfg.ff_mult, rng, residual_scale=res) for _ in range(cfg.num_layers)
        ]

    def frame(self, samples: np.ndarray, valid_len: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Slice (B, N) samples into (B, T, win) frames and a validity mask."""
        cfg = self.cfg
        samples = np.atleast_2d(samples)
        T = cfg.num_frames(samples.shape[1])
        if T < 1:
            raise ValueError(f"waveform of {samples.shape[1]} samples is shorter than one {cfg.win}-sample window")
        frames = np.lib.stride_tricks.sliding_window_view(samples, cfg.win, axis=1)[:, :: cfg.hop][:, :T]
        n_valid = np.array([cfg.num_frames(int(v)) for v in np.atleast_1d(valid_len)])
        mask = np.arange(T)[None, :] < n_valid[:, None]
        return frames, mask

    def forward_frames(self, frames: np.ndarray, mask: np.ndarray) -> list[Tensor]:
        """All tap points for pre-framed input; returns ``num_layers + 1`` tensors."""
        if not mask[:, 0].all():
            raise ValueError("every item needs at least one complete analysis window")
        T = frames.shape[1]
        h = self.front(frames, mask) + self.cfg.pos_scale * sinusoidal_positions(T, self.cfg.d)
        keep = mask[..., None].astype(np.float64)
        taps = [self._tap(h) * keep]
        for layer in self.layers:
            h = layer(h, mask)
            taps.append(self._tap(h) * keep)
        return taps

    def _tap(self, h: Tensor) -> Tensor:
        if not self.cfg.tap_norm:
            return h
        d = self.cfg.d
        return nd.layer_norm(h, nd.Tensor(np.ones(d)), nd.Tensor(np.zeros(d)))

    def encode(self, samples: np.ndarray, valid_len, source: str = "sentence", trim: bool = True) -> FrameFeatures:
        """Encode a batch of waveforms (B, N) to frame features.

        With ``trim`` the computation only covers up to the longest valid
        prefix in the batch and the masked tail is zero-filled afterwards.
        When the config is frozen no graph is recorded.
        """
        frames, mask = self.frame(samples, valid_len)
        T = frames.shape[1]
        t_use = int(mask.sum(axis=1).max()) if trim else T
        if self.cfg.frozen:
            with nd.no_grad():
                taps = self.forward_frames(frames[:, :t_use], mask[:, :t_use])
        else:
            taps = self.forward_frames(frames[:, :t_use], mask[:, :t_use])
        if t_use < T:
            pad = np.zeros((taps[0].shape[0], T - t_use, self.cfg.d))
            taps = [nd.concat([t, pad], axis=1) for t in taps]
        H = taps[self.cfg.extraction] if self.cfg.extraction != "weighted" else taps[-1]
        return FrameFeatures(H, mask, source, per_layer=taps)


class LayerWeights(Module):
    def __init__(self, n_layers: int):
        self.logits = Parameter(np.zeros(n_layers))

    def __call__(self, per_layer: list[Tensor]) -> Tensor:
        return extract(per_layer, "weighted", self)


def extract(per_layer, extraction, weights: LayerWeights | None = None) -> Tensor:
    """Fixed tap ``per_layer[k]`` or the softmax-weighted sum over all taps."""
    if not per_layer:
        raise ValueError("no layers to extract from")
    if extraction == "weighted":
        if weights is None:
            raise ValueError("weighted extraction needs LayerWeights")
        if weights.logits.shape != (len(per_layer),):
            raise nd.ShapeError(f"{weights.logits.shape[0]} weights for {len(per_layer)} layers")
        alpha = nd.softmax(weights.logits)
        out = None
        for j, h in enumerate(per_layer):
            term = nd.as_tensor(h) * alpha[j]
            out = term if out is None else out + term
        return out
    k = int(extraction)
    if not 0 <= k < len(per_layer):
        raise IndexError(f"layer {k} outside [0, {len(per_layer) - 1}]")
    return nd.as_tensor(per_layer[k])
