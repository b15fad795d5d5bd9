"""Paired vowel + sentence recordings with controllable, complementary pathology cues.

Each subject gets a sustained vowel and a read "sentence" built from the same
cycle-by-cycle harmonic source. Cue placement is complementary by
construction:

* ``vowel_cue`` patients have elevated jitter/shimmer and low HNR in the vowel
  but a healthy sentence.
* ``sentence_cue`` patients speak on a flat pitch with tremor in the sentence
  but sustain a healthy vowel.

Vowel synthesis ignores the tremor/intonation fields and sentence synthesis
uses the fixed healthy phonation baseline, so neither recording leaks the
other's cue.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .audio import Waveform, write_wav

LABELS = {"healthy": 0, "pathological": 1}
SUBTYPES = ("none", "vowel_cue", "sentence_cue", "both")

# phonation used for every sentence and for healthy vowels' lower bound
_SENTENCE_JITTER = 0.3
_SENTENCE_SHIMMER = 2.0
_SENTENCE_HNR = 25.0

_FORMANTS = [(700, 1200), (300, 2300), (300, 800), (450, 1900), (500, 900)]


@dataclass
class SubjectSpec:
    subject_id: str
    label: str
    subtype: str
    f0: float
    jitter_pct: float
    shimmer_pct: float
    hnr_db: float
    f0_range_semitones: float
    tremor_hz: float
    tremor_depth: float

    def __post_init__(self):
        if self.label not in LABELS or self.subtype not in SUBTYPES:
            raise ValueError(f"bad label/subtype {self.label}/{self.subtype}")
        if (self.label == "healthy") != (self.subtype == "none"):
            raise ValueError("healthy subjects must have subtype 'none' and patients must not")
        if self.jitter_pct < 0 or self.shimmer_pct < 0 or math.isnan(self.hnr_db):
            raise ValueError("jitter/shimmer must be non-negative and hnr defined")

    @property
    def y(self) -> int:
        return LABELS[self.label]


@dataclass
class GenConfig:
    n_subjects: int = 200
    patho_fraction: float = 0.5
    vowel_cue_share: float = 0.5
    both_share: float = 0.0
    f0_range_hz: tuple[float, float] = (90.0, 250.0)
    healthy_jitter: tuple[float, float] = (0.1, 0.5)
    patho_jitter: tuple[float, float] = (2.0, 3.5)
    healthy_shimmer: tuple[float, float] = (1.0, 3.0)
    patho_shimmer: tuple[float, float] = (5.0, 9.0)
    healthy_hnr: tuple[float, float] = (22.0, 30.0)
    patho_hnr: tuple[float, float] = (8.0, 14.0)
    healthy_f0_span: tuple[float, float] = (7.5, 10.0)
    patho_f0_span: tuple[float, float] = (0.5, 1.5)
    tremor_hz: tuple[float, float] = (4.0, 7.0)
    tremor_depth: tuple[float, float] = (0.5, 0.8)
    segments: tuple[int, int] = (6, 10)
    pause_s: tuple[float, float] = (0.05, 0.15)
    vowel_seconds: float = 3.0
    sentence_seconds: float = 5.0
    sample_rate: int = 16000
    seed: int = 0

    def __post_init__(self):
        for name in ("patho_fraction", "vowel_cue_share", "both_share"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if self.vowel_cue_share + self.both_share > 1.0:
            raise ValueError("vowel_cue_share + both_share exceeds 1")
        if self.n_subjects < 1:
            raise ValueError("n_subjects must be positive")


def _subject_rng(seed: int, index: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index, stream]))


def draw_subjects(cfg: GenConfig) -> list[SubjectSpec]:
    """Subject table with exact class counts (pathological count is floored)."""
    n_patho = int(math.floor(cfg.n_subjects * cfg.patho_fraction))
    n_vowel = int(math.floor(n_patho * cfg.vowel_cue_share))
    n_both = int(math.floor(n_patho * cfg.both_share))
    n_sent = n_patho - n_vowel - n_both
    kinds = ["none"] * (cfg.n_subjects - n_patho) + ["vowel_cue"] * n_vowel + ["sentence_cue"] * n_sent
    kinds += ["both"] * n_both
    order = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xA5])).permutation(len(kinds))
    subjects = []
    for i, idx in enumerate(order):
        subtype = kinds[idx]
        rng = _subject_rng(cfg.seed, i, 0)
        u = lambda r: float(rng.uniform(*r))  # noqa: E731
        bad_vowel = subtype in ("vowel_cue", "both")
        bad_sent = subtype in ("sentence_cue", "both")
        subjects.append(
            SubjectSpec(
                subject_id=f"S{i:04d}",
                label="healthy" if subtype == "none" else "pathological",
                subtype=subtype,
                f0=u(cfg.f0_range_hz),
                jitter_pct=u(cfg.patho_jitter if bad_vowel else cfg.healthy_jitter),
                shimmer_pct=u(cfg.patho_shimmer if bad_vowel else cfg.healthy_shimmer),
                hnr_db=u(cfg.patho_hnr if bad_vowel else cfg.healthy_hnr),
                f0_range_semitones=u(cfg.patho_f0_span if bad_sent else cfg.healthy_f0_span),
                tremor_hz=u(cfg.tremor_hz) if bad_sent else 0.0,
                tremor_depth=u(cfg.tremor_depth) if bad_sent else 0.0,
            )
        )
    return subjects


# ---------------------------------------------------------------- source model


def phonate(
    f0_track,
    n_samples: int,
    sr: int,
    jitter_pct: float,
    shimmer_pct: float,
    rng: np.random.Generator,
    amp_track=None,
    formants=None,
    max_partials: int = 40,
) -> np.ndarray:
    """Cycle-synchronous harmonic source.

    Every glottal cycle has its own period (target f0 times a jitter factor)
    and amplitude (shimmer factor). Within a cycle the phase runs linearly, so
    all partials start at phase zero at each cycle boundary and the waveform is
    continuous. Partial k has amplitude 1/k**2 (-12 dB/octave), optionally
    emphasized near the given formant frequencies.
    """
    sig_p = jitter_pct / 100.0 * math.sqrt(math.pi) / 2.0
    sig_a = shimmer_pct / 100.0 * math.sqrt(math.pi) / 2.0
    starts, periods, amps, f0s = [], [], [], []
    t = 0.0
    while t < n_samples:
        f = float(f0_track(t / sr))
        p = sr / f * (1.0 + sig_p * rng.standard_normal())
        starts.append(t)
        periods.append(p)
        amps.append(max(0.0, 1.0 + sig_a * rng.standard_normal()))
        f0s.append(f)
        t += p
    starts, periods = np.array(starts), np.array(periods)
    amps, f0s = np.array(amps), np.array(f0s)
    n = np.arange(n_samples)
    idx = np.searchsorted(starts, n, side="right") - 1
    phase = 2 * np.pi * (n - starts[idx]) / periods[idx]
    K = int(min(max_partials, max(8, math.floor(0.45 * sr / f0s.max()))))
    k = np.arange(1, K + 1)
    gains = np.tile(1.0 / k**2, (len(f0s), 1))
    if formants is not None:
        fk = f0s[:, None] * k[None, :]
        f1, f2 = formants
        gains *= 1.0 + 6.0 * np.exp(-(((fk - f1) / 120.0) ** 2)) + 4.0 * np.exp(-(((fk - f2) / 180.0) ** 2))
    gains[(f0s[:, None] * k[None, :]) > 0.45 * sr] = 0.0
    gains *= amps[:, None]
    out = np.zeros(n_samples)
    for j in range(K):
        out += gains[idx, j] * np.sin((j + 1) * phase)
    if amp_track is not None:
        out *= amp_track(n / sr)
    return out


def _add_hnr_noise(x: np.ndarray, hnr_db: float, rng: np.random.Generator, envelope=None) -> np.ndarray:
    if not math.isfinite(hnr_db):
        return x
    p = np.mean(x * x)
    noise = rng.standard_normal(len(x)) * math.sqrt(p / 10 ** (hnr_db / 10))
    if envelope is not None:
        noise *= envelope
    return x + noise


def _ramp(n: int, n_edge: int) -> np.ndarray:
    env = np.ones(n)
    n_edge = min(n_edge, n // 2)
    if n_edge:
        r = 0.5 - 0.5 * np.cos(np.pi * np.arange(n_edge) / n_edge)
        env[:n_edge] = r
        env[n - n_edge :] = r[::-1]
    return env


def gen_vowel(spec: SubjectSpec, cfg: GenConfig, rng: np.random.Generator) -> Waveform:
    sr = cfg.sample_rate
    n = int(round(cfg.vowel_seconds * sr))
    x = phonate(lambda t: spec.f0, n, sr, spec.jitter_pct, spec.shimmer_pct, rng)
    x = _add_hnr_noise(x, spec.hnr_db, rng)
    x *= _ramp(n, int(0.05 * sr))
    return Waveform(0.3 * x / max(np.abs(x).max(), 1e-12), sr)


def sentence_layout(spec: SubjectSpec, cfg: GenConfig, rng: np.random.Generator):
    """Segment boundaries (seconds) and per-segment pitch offsets (semitones)."""
    n_seg = int(rng.integers(cfg.segments[0], cfg.segments[1] + 1))
    pauses = rng.uniform(*cfg.pause_s, size=n_seg - 1)
    lead, tail = 0.1, 0.1
    avail = cfg.sentence_seconds - lead - tail - pauses.sum()
    w = rng.uniform(0.7, 1.3, size=n_seg)
    durs = avail * w / w.sum()
    bounds = []
    t = lead
    for i in range(n_seg):
        bounds.append((t, t + durs[i]))
        t += durs[i] + (pauses[i] if i < n_seg - 1 else 0.0)
    span = spec.f0_range_semitones
    offsets = rng.uniform(-span / 2, span / 2, size=n_seg)
    offsets[0], offsets[-1] = span / 2, -span / 2
    return bounds, offsets


def gen_sentence(spec: SubjectSpec, cfg: GenConfig, rng: np.random.Generator) -> Waveform:
    sr = cfg.sample_rate
    n = int(round(cfg.sentence_seconds * sr))
    bounds, offsets = sentence_layout(spec, cfg, rng)
    formants = [_FORMANTS[i] for i in rng.integers(len(_FORMANTS), size=len(bounds))]
    starts = np.array([b[0] for b in bounds])
    ends = np.array([b[1] for b in bounds])
    glide = rng.uniform(-0.5, 0.5, size=len(bounds))
    tr_phase = rng.uniform(0, 2 * np.pi)

    def contour(t):
        i = min(max(int(np.searchsorted(starts, t, side="right")) - 1, 0), len(bounds) - 1)
        pos = np.clip((t - starts[i]) / (ends[i] - starts[i]), 0.0, 1.0)
        semis = offsets[i] + glide[i] * (pos - 0.5)
        semis = semis + spec.tremor_depth * np.sin(2 * np.pi * spec.tremor_hz * t + tr_phase)
        return spec.f0 * 2.0 ** (semis / 12.0)

    def loudness(t):
        return 1.0 + 0.25 * spec.tremor_depth * np.sin(2 * np.pi * spec.tremor_hz * t + tr_phase)

    env = np.zeros(n)
    out = np.zeros(n)
    for (a, b), fm in zip(bounds, formants):
        i0, i1 = int(round(a * sr)), min(int(round(b * sr)), n)
        seg_env = _ramp(i1 - i0, int(0.02 * sr))
        seg = phonate(
            lambda t, a=a: contour(a + t),
            i1 - i0,
            sr,
            _SENTENCE_JITTER,
            _SENTENCE_SHIMMER,
            rng,
            amp_track=lambda t, a=a: loudness(a + t),
            formants=fm,
        )
        out[i0:i1] = seg * seg_env
        env[i0:i1] = seg_env
    out = _add_hnr_noise(out, _SENTENCE_HNR + 10 * math.log10(max(env.mean(), 1e-3)), rng, env)
    out += 1e-4 * rng.standard_normal(n)
    return Waveform(0.3 * out / max(np.abs(out).max(), 1e-12), sr)


def generate_subject(spec: SubjectSpec, index: int, cfg: GenConfig) -> tuple[Waveform, Waveform]:
    vowel = gen_vowel(spec, cfg, _subject_rng(cfg.seed, index, 1))
    sentence = gen_sentence(spec, cfg, _subject_rng(cfg.seed, index, 2))
    return vowel, sentence


def gen_dataset(cfg: GenConfig, out_dir) -> Path:
    """Write ``<id>_vowel.wav``/``<id>_sentence.wav`` per subject plus manifests.

    Returns the path of ``manifest.jsonl``; paths inside it are relative to
    the manifest's directory. ``subjects.jsonl`` records the generating
    parameters of every subject.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    subjects = draw_subjects(cfg)
    rows, table = [], []
    for i, spec in enumerate(subjects):
        vowel, sentence = generate_subject(spec, i, cfg)
        vp, sp = f"{spec.subject_id}_vowel.wav", f"{spec.subject_id}_sentence.wav"
        write_wav(out / vp, vowel)
        write_wav(out / sp, sentence)
        rows.append({"subject_id": spec.subject_id, "label": spec.y, "vowel_path": vp, "sentence_path": sp})
        table.append(asdict(spec))
    manifest = out / "manifest.jsonl"
    manifest.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))
    (out / "subjects.jsonl").write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in table))
    (out / "gen_config.json").write_text(json.dumps(asdict(cfg), indent=2, sort_keys=True) + "\n")
    return manifest
