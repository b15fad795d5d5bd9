"""Waveform I/O, standardization and the two-tier augmentation policy.

Training items follow one fixed path::

    resample -> augment -> normalize -> fix_length

Normalization statistics come from valid samples only and padding is written
after normalization, so the padded tail is exactly zero.
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy import signal

TARGET_RATE = 16000


class WavFormatError(ValueError):
    """Malformed or unsupported WAV content."""


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int
    valid_len: int | None = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError("waveform must be mono")
        if self.sample_rate <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate}")
        if self.valid_len is None:
            self.valid_len = len(self.samples)
        if not 0 <= self.valid_len <= len(self.samples):
            raise ValueError(f"valid_len {self.valid_len} outside [0, {len(self.samples)}]")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    @property
    def valid(self) -> np.ndarray:
        return self.samples[: self.valid_len]


# ---------------------------------------------------------------- WAV I/O

_PCM = 1
_IEEE_FLOAT = 3
_EXTENSIBLE = 0xFFFE


def load_wav(path) -> Waveform:
    """Read a RIFF/WAVE file (PCM16 or float32). Multichannel keeps channel 0."""
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise WavFormatError(f"{path}: not a RIFF/WAVE file")
    pos = 12
    fmt = None
    data = None
    while pos + 8 <= len(raw):
        cid, size = struct.unpack("<4sI", raw[pos : pos + 8])
        body = raw[pos + 8 : pos + 8 + size]
        if len(body) < size:
            raise WavFormatError(f"{path}: chunk {cid!r} truncated ({len(body)} of {size} bytes)")
        if cid == b"fmt ":
            if size < 16:
                raise WavFormatError(f"{path}: fmt chunk too short")
            fmt = struct.unpack("<HHIIHH", body[:16])
            if fmt[0] == _EXTENSIBLE and size >= 26:
                fmt = (struct.unpack("<H", body[24:26])[0],) + fmt[1:]
        elif cid == b"data":
            data = body
        pos += 8 + size + (size & 1)
    if fmt is None or data is None:
        raise WavFormatError(f"{path}: missing fmt or data chunk")
    code, channels, rate, _, block_align, bits = fmt
    if channels < 1 or rate <= 0:
        raise WavFormatError(f"{path}: invalid channel count or sample rate")
    if code == _PCM and bits == 16:
        x = np.frombuffer(data, dtype="<i2").astype(np.float64) / 32768.0
    elif code == _IEEE_FLOAT and bits == 32:
        x = np.frombuffer(data, dtype="<f4").astype(np.float64)
    else:
        raise WavFormatError(f"{path}: unsupported codec (format {code}, {bits} bits)")
    if len(x) % channels:
        raise WavFormatError(f"{path}: data length is not a whole number of frames")
    return Waveform(x.reshape(-1, channels)[:, 0].copy(), rate)


def write_wav(path, wav: Waveform, sample_format: str = "float32") -> None:
    x = wav.samples
    if sample_format == "float32":
        payload = x.astype("<f4").tobytes()
        code, bits = _IEEE_FLOAT, 32
    elif sample_format == "pcm16":
        payload = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2").tobytes()
        code, bits = _PCM, 16
    else:
        raise ValueError(f"unknown sample format {sample_format!r}")
    block = bits // 8
    fmt = struct.pack("<HHIIHH", code, 1, wav.sample_rate, wav.sample_rate * block, block, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt
    body += b"data" + struct.pack("<I", len(payload)) + payload
    Path(path).write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)


# ---------------------------------------------------------------- standardization


def _rational(ratio: float, max_den: int = 1000) -> tuple[int, int]:
    fr = Fraction(ratio).limit_denominator(max_den)
    return fr.numerator, fr.denominator


def _resample_ratio(x: np.ndarray, up: int, down: int) -> np.ndarray:
    if up == down:
        return x.copy()
    return signal.resample_poly(x, up, down, window=("kaiser", 8.0))


def resample(x: Waveform, target_hz: int = TARGET_RATE) -> Waveform:
    """Band-limited rate conversion (polyphase windowed-sinc)."""
    if x.sample_rate == target_hz:
        return x
    g = math.gcd(target_hz, x.sample_rate)
    up, down = target_hz // g, x.sample_rate // g
    y = _resample_ratio(x.valid, up, down)
    return Waveform(y, target_hz)


def normalize(x: Waveform, eps: float = 1e-8) -> Waveform:
    """Zero mean and unit variance over the valid region; padding stays zero."""
    v = x.valid
    out = np.zeros_like(x.samples)
    if len(v):
        std = v.std()
        if std > eps:
            out[: x.valid_len] = (v - v.mean()) / std
    return Waveform(out, x.sample_rate, x.valid_len)


def fix_length(x: Waveform, seconds: float = 5.0) -> Waveform:
    """Zero-pad the tail or keep the head so the result has ``seconds`` of samples."""
    n = int(round(seconds * x.sample_rate))
    keep = min(x.valid_len, n)
    out = np.zeros(n)
    out[:keep] = x.samples[:keep]
    return Waveform(out, x.sample_rate, keep)


# ---------------------------------------------------------------- transforms


def add_noise_snr(x: Waveform, snr_db: float, rng: np.random.Generator) -> Waveform:
    """White Gaussian noise scaled so the realized SNR over valid samples equals ``snr_db``."""
    v = x.valid
    p_sig = float(np.mean(v * v)) if len(v) else 0.0
    if p_sig <= 0.0:
        raise ValueError("cannot set an SNR against a zero-power signal")
    noise = rng.standard_normal(len(v))
    noise *= math.sqrt(p_sig / 10 ** (snr_db / 10) / np.mean(noise * noise))
    out = x.samples.copy()
    out[: x.valid_len] += noise
    return Waveform(out, x.sample_rate, x.valid_len)


def speed_perturb(x: Waveform, factor: float, rng: np.random.Generator | None = None) -> Waveform:
    """Resample-style speed change: duration scales by 1/factor, pitch by factor."""
    if not 0.5 <= factor <= 2.0:
        raise ValueError(f"speed factor {factor} outside [0.5, 2.0]")
    p, q = _rational(factor)
    y = _resample_ratio(x.valid, q, p)
    return Waveform(y, x.sample_rate)


def _stft(x: np.ndarray, n_fft: int, hop: int, win: np.ndarray) -> np.ndarray:
    frames = np.lib.stride_tricks.sliding_window_view(x, n_fft)[::hop]
    return np.fft.rfft(frames * win, axis=-1).T


def _istft(Z: np.ndarray, n_fft: int, hop: int, win: np.ndarray) -> np.ndarray:
    frames = np.fft.irfft(Z.T, n=n_fft, axis=-1) * win
    n = n_fft + hop * (len(frames) - 1)
    y = np.zeros(n)
    norm = np.zeros(n)
    for i, f in enumerate(frames):
        y[i * hop : i * hop + n_fft] += f
        norm[i * hop : i * hop + n_fft] += win * win
    return y / np.maximum(norm, 1e-8)


def time_stretch(x: np.ndarray, rate: float, n_fft: int = 1024, hop: int = 256) -> np.ndarray:
    """Phase-vocoder stretch; output length is ``round(len(x) * rate)``."""
    length = int(round(len(x) * rate))
    win = np.hanning(n_fft + 1)[:-1]
    pad = np.pad(x, (n_fft, n_fft + hop))
    Z = _stft(pad, n_fft, hop, win)
    omega = 2 * np.pi * hop * np.arange(Z.shape[0]) / n_fft
    steps = np.arange(0, Z.shape[1] - 1, 1.0 / rate)
    mag = np.abs(Z)
    ang = np.angle(Z)
    out = np.empty((Z.shape[0], len(steps)), dtype=complex)
    phase = ang[:, 0].copy()
    for i, s in enumerate(steps):
        j = int(s)
        frac = s - j
        out[:, i] = ((1 - frac) * mag[:, j] + frac * mag[:, j + 1]) * np.exp(1j * phase)
        dphi = ang[:, j + 1] - ang[:, j] - omega
        dphi -= 2 * np.pi * np.round(dphi / (2 * np.pi))
        phase += omega + dphi
    y = _istft(out, n_fft, hop, win)
    start = int(round(n_fft * rate))
    y = y[start : start + length]
    return np.pad(y, (0, length - len(y)))


def pitch_shift(x: Waveform, semitones: float, rng: np.random.Generator | None = None) -> Waveform:
    """Shift pitch by 2**(semitones/12) and keep the sample count unchanged."""
    if abs(semitones) > 12:
        raise ValueError(f"pitch shift {semitones} semitones outside +/-12")
    if semitones == 0:
        return Waveform(x.valid.copy(), x.sample_rate)
    ratio = 2.0 ** (semitones / 12.0)
    n = x.valid_len
    stretched = time_stretch(x.valid, ratio)
    p, q = _rational(ratio)
    y = _resample_ratio(stretched, q, p)
    if len(y) >= n:
        y = y[:n]
    else:
        y = np.pad(y, (0, n - len(y)))
    return Waveform(y, x.sample_rate)


# ---------------------------------------------------------------- augmentation policy


@dataclass
class AugmentConfig:
    p_sentence: float = 0.25
    p_vowel: float = 0.10
    snr_db: tuple[float, float] = (0.0, 30.0)
    speed: tuple[float, float] = (0.75, 1.25)
    pitch_semitones: tuple[float, float] = (-4.0, 4.0)
    p_transform: float = 0.5
    enabled: bool = True

    def __post_init__(self):
        self.snr_db, self.speed, self.pitch_semitones = (
            tuple(self.snr_db),
            tuple(self.speed),
            tuple(self.pitch_semitones),
        )
        for name in ("p_sentence", "p_vowel", "p_transform"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        for name in ("snr_db", "speed", "pitch_semitones"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} range is not ordered: {lo} > {hi}")

    def activation_prob(self, source: str) -> float:
        if not self.enabled:
            return 0.0
        return self.p_vowel if source == "vowel" else self.p_sentence


@dataclass
class AugPlan:
    speed: float | None = None
    pitch: float | None = None
    snr_db: float | None = None
    kinds: list[str] = field(default_factory=list)


def draw_augmentation(source: str, cfg: AugmentConfig, rng: np.random.Generator) -> AugPlan | None:
    """Decide whether an item is augmented and with which parameters."""
    if rng.random() >= cfg.activation_prob(source):
        return None
    use = rng.random(3) < cfg.p_transform
    if not use.any():
        use[rng.integers(3)] = True
    plan = AugPlan()
    if use[0]:
        plan.speed = float(rng.uniform(*cfg.speed))
        plan.kinds.append("speed")
    if use[1]:
        plan.pitch = float(rng.uniform(*cfg.pitch_semitones))
        plan.kinds.append("pitch")
    if use[2]:
        plan.snr_db = float(rng.uniform(*cfg.snr_db))
        plan.kinds.append("noise")
    return plan


def apply_plan(x: Waveform, plan: AugPlan, rng: np.random.Generator) -> Waveform:
    y = Waveform(x.valid.copy(), x.sample_rate)
    if plan.speed is not None:
        y = speed_perturb(y, plan.speed, rng)
    if plan.pitch is not None:
        y = pitch_shift(y, plan.pitch, rng)
    if plan.snr_db is not None:
        y = add_noise_snr(y, plan.snr_db, rng)
    return y


def augment(x: Waveform, source: str, cfg: AugmentConfig, rng: np.random.Generator) -> Waveform:
    """Randomly augment ``x``; the identity path returns ``x`` unchanged."""
    plan = draw_augmentation(source, cfg, rng)
    if plan is None:
        return x
    return apply_plan(x, plan, rng)


def item_rng(seed: int, item_id: str, epoch: int, source: str) -> np.random.Generator:
    """Per-item stream derived from (master seed, item id, epoch, source)."""
    key = [seed & 0xFFFFFFFF, zlib.crc32(item_id.encode()), epoch, zlib.crc32(source.encode())]
    return np.random.default_rng(np.random.SeedSequence(key))


def preprocess(
    x: Waveform,
    seconds: float = 5.0,
    source: str | None = None,
    aug_cfg: AugmentConfig | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[Waveform, AugPlan | None]:
    """Full item path: resample, optional augmentation, normalize, fix_length."""
    y = resample(x)
    plan = None
    if aug_cfg is not None and rng is not None:
        plan = draw_augmentation(source, aug_cfg, rng)
        if plan is not None:
            y = apply_plan(y, plan, rng)
    return fix_length(normalize(y), seconds), plan


def with_valid(x: Waveform, valid_len: int) -> Waveform:
    return replace(x, valid_len=valid_len)
