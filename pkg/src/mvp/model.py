"""Strategy models: single-source baselines, waveform concatenation, feature
fusion and decision-level combination, all ending in one FC + sigmoid head.

Items carry raw (resampled) recordings; the model turns them into fixed-length
waveforms, runs its backbone(s) and returns logits. With a frozen backbone the
frame features are pure functions of (backbone, recording, augmentation plan),
so they are memoised in a :class:`FeatureStore` shared across folds and
strategies.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import ndcore as nd
from .audio import AugmentConfig, Waveform, apply_plan, draw_augmentation, fix_length, item_rng, normalize
from .backbone import Backbone, BackboneConfig, FrameFeatures, LayerWeights, extract
from .fusion import METHODS, AttentionPool, FusedRepresentation, TEFusionConfig, make_fusion
from .ndcore import Tensor
from .nn import Linear, Module

KINDS = ("single-sent", "single-vowel", "single-mix", "wc", "iff", "dlc")
STRATEGY_NAMES = ("single-sent", "single-vowel", "single-mix", "wc", "dlc") + tuple(f"iff-{m}" for m in METHODS)
CHECKPOINT_FORMAT = "mvp-checkpoint/1"


@dataclass
class StrategySpec:
    kind: str
    iff_method: str | None = None
    frozen: bool = False
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    te: TEFusionConfig = field(default_factory=TEFusionConfig)
    vowel_seed: int = 101
    sentence_seed: int = 202
    init_seed: int = 0
    wc_order: str = "sentence-vowel"
    seconds: float = 5.0

    def __post_init__(self):
        if isinstance(self.backbone, dict):
            self.backbone = BackboneConfig(**self.backbone)
        if isinstance(self.te, dict):
            self.te = TEFusionConfig(**self.te)
        if self.kind not in KINDS:
            raise ValueError(f"unknown strategy kind {self.kind!r}")
        if (self.kind == "iff") != (self.iff_method is not None):
            raise ValueError("iff_method is required for kind 'iff' and only for it")
        if self.iff_method is not None and self.iff_method not in METHODS:
            raise ValueError(f"unknown fusion method {self.iff_method!r}")
        if self.wc_order not in ("sentence-vowel", "vowel-sentence"):
            raise ValueError(f"wc_order must be sentence-vowel or vowel-sentence, got {self.wc_order!r}")
        self.backbone = replace(self.backbone, frozen=self.frozen)

    @classmethod
    def from_name(cls, name: str, **kw) -> "StrategySpec":
        if name not in STRATEGY_NAMES:
            raise ValueError(f"unknown strategy {name!r}; choose from {', '.join(STRATEGY_NAMES)}")
        if name.startswith("iff-"):
            return cls(kind="iff", iff_method=name[4:], **kw)
        return cls(kind=name, **kw)

    @property
    def name(self) -> str:
        return f"iff-{self.iff_method}" if self.kind == "iff" else self.kind

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "StrategySpec":
        return cls(**d)


@dataclass
class Prediction:
    y_hat: np.ndarray
    logit: np.ndarray

    @property
    def label(self) -> np.ndarray:
        return (self.y_hat >= 0.5).astype(int)


@dataclass
class Item:
    """One training/evaluation unit: a subject's recordings keyed by source."""

    item_id: str
    label: int
    waves: dict[str, Waveform]

    def recording_key(self, source: str) -> str:
        return f"{self.item_id}/{source}"


@dataclass
class RunContext:
    """Per-run knobs threaded through batching.

    ``aug`` is only consulted for training batches; ``audit`` collects every
    (item, source, epoch) that was actually augmented.
    """

    aug: AugmentConfig | None = None
    seed: int = 0
    store: "FeatureStore | None" = None
    audit: list | None = None
    eval_batch: int = 64


class FeatureStore:
    """Memo of frozen-backbone taps, keyed by backbone fingerprint and recording."""

    def __init__(self):
        self._data: dict[tuple[str, str], np.ndarray] = {}
        self.hits = 0
        self.misses = 0

    def get(self, fp: str, key: str):
        out = self._data.get((fp, key))
        if out is None:
            self.misses += 1
        else:
            self.hits += 1
        return out

    def put(self, fp: str, key: str, taps: np.ndarray) -> None:
        self._data[(fp, key)] = taps

    def __contains__(self, fk) -> bool:
        return fk in self._data

    def __len__(self) -> int:
        return len(self._data)


def backbone_fingerprint(bb: Backbone) -> str:
    cfg = replace(bb.cfg, frozen=False, extraction=0)
    text = json.dumps([bb.seed, asdict(cfg)], sort_keys=True)
    return hashlib.sha1(text.encode()).hexdigest()[:16]


def prepare_wave(item: Item, source: str, seconds: float, epoch: int, ctx: RunContext, train: bool):
    """Fixed-length waveform for one recording plus a key naming its content.

    Returns ``(waveform_or_None, key)``; the waveform is built lazily by the
    caller through :func:`render_wave` so cache hits skip all DSP.
    """
    raw = item.waves[source]
    key = item.recording_key(source)
    plan, rng = None, None
    if train and ctx.aug is not None:
        rng = item_rng(ctx.seed, item.item_id, epoch, source)
        plan = draw_augmentation(source, ctx.aug, rng)
    if plan is not None:
        key = f"{key}@aug{ctx.seed}.{epoch}"
        if ctx.audit is not None:
            ctx.audit.append((item.item_id, source, epoch))
    return (raw, plan, rng, seconds), key


def render_wave(recipe) -> Waveform:
    raw, plan, rng, seconds = recipe
    y = raw if plan is None else apply_plan(raw, plan, rng)
    return fix_length(normalize(y), seconds)


def concat_waves(first: Waveform, second: Waveform) -> Waveform:
    samples = np.concatenate([first.samples, second.samples])
    return Waveform(samples, first.sample_rate, len(first.samples) + second.valid_len)


class DecisionHead(Module):
    def __init__(self, width: int, rng: np.random.Generator):
        self.width = width
        self.fc = Linear(width, 1, rng, std=0.02)

    def __call__(self, z) -> Tensor:
        z = z.z if isinstance(z, FusedRepresentation) else nd.as_tensor(z)
        if z.shape[-1] != self.width:
            raise nd.ShapeError(f"head expects width {self.width}, got {z.shape[-1]}")
        return self.fc(z).reshape(z.shape[0])


def decision_head(z, head: DecisionHead) -> Prediction:
    logit = head(z).data
    return Prediction(nd._sigmoid_np(logit), logit)


def bce_loss(logits, y) -> Tensor:
    return nd.bce_with_logits(logits, y)


class _Stream:
    """One backbone fed by one kind of input (vowel, sentence, mixed or wc)."""

    def __init__(self, name: str, backbone: Backbone, weights: LayerWeights | None):
        self.name = name
        self.backbone = backbone
        self.weights = weights


class Strategy(Module):
    """Common plumbing; subclasses define their streams and :meth:`logits_from`."""

    spec: StrategySpec

    def _make_backbone(self, seed: int) -> tuple[Backbone, LayerWeights | None]:
        cfg = self.spec.backbone
        weights = LayerWeights(cfg.num_layers + 1) if cfg.extraction == "weighted" else None
        return Backbone(cfg, seed), weights

    def streams(self) -> list[_Stream]:
        raise NotImplementedError

    def logits_from(self, feats: dict[str, FrameFeatures]) -> Tensor:
        raise NotImplementedError

    # -------------------------------------------------------------- parameters

    def backbone_parameter_ids(self) -> set[int]:
        return {id(p) for s in self.streams() for p in s.backbone.parameters()}

    def named_trainable(self) -> list[tuple[str, nd.Parameter]]:
        if not self.spec.frozen:
            return list(self.named_parameters())
        frozen = self.backbone_parameter_ids()
        return [(n, p) for n, p in self.named_parameters() if id(p) not in frozen]

    def trainable_parameters(self) -> list[nd.Parameter]:
        return [p for _, p in self.named_trainable()]

    # ---------------------------------------------------------------- encoding

    def _stream_waves(self, stream: str, items: list[Item], epoch: int, ctx: RunContext, train: bool):
        secs = self.spec.seconds
        out = []
        for it in items:
            if stream == "mixed":
                (src,) = it.waves
                out.append(prepare_wave(it, src, secs, epoch, ctx, train))
            elif stream == "wc":
                order = self.spec.wc_order.split("-")
                a, ka = prepare_wave(it, order[0], secs, epoch, ctx, train)
                b, kb = prepare_wave(it, order[1], secs, epoch, ctx, train)
                out.append(((a, b), f"{ka}+{kb}"))
            else:
                out.append(prepare_wave(it, stream, secs, epoch, ctx, train))
        return out

    @staticmethod
    def _render(recipe) -> Waveform:
        if isinstance(recipe[0], tuple) and len(recipe) == 2:
            return concat_waves(render_wave(recipe[0]), render_wave(recipe[1]))
        return render_wave(recipe)

    def _encode(self, s: _Stream, recipes, ctx: RunContext) -> FrameFeatures:
        bb, cfg = s.backbone, s.backbone.cfg
        if cfg.frozen and ctx.store is not None:
            taps = self._cached_taps(bb, recipes, ctx)
            lens = [t.shape[1] for t in taps]
            T = max(lens)
            mask = np.arange(T)[None, :] < np.array(lens)[:, None]
            stack = np.zeros((taps[0].shape[0], len(taps), T, cfg.d))
            for i, t in enumerate(taps):
                stack[:, i, : t.shape[1]] = t
            per_layer = [nd.Tensor(stack[j]) for j in range(stack.shape[0])]
        else:
            waves = [self._render(r) for r, _ in recipes]
            feats = bb.encode(np.stack([w.samples for w in waves]), [w.valid_len for w in waves], s.name)
            t_use = int(feats.mask.sum(axis=1).max())
            mask = feats.mask[:, :t_use]
            per_layer = [h[:, :t_use] for h in feats.per_layer]
        H = extract(per_layer, cfg.extraction, s.weights)
        return FrameFeatures(H, mask, s.name, per_layer=per_layer)

    def _cached_taps(self, bb: Backbone, recipes, ctx: RunContext) -> list[np.ndarray]:
        fp = backbone_fingerprint(bb)
        found = [ctx.store.get(fp, key) for _, key in recipes]
        todo = [i for i, t in enumerate(found) if t is None]
        for start in range(0, len(todo), ctx.eval_batch):
            chunk = todo[start : start + ctx.eval_batch]
            waves = [self._render(recipes[i][0]) for i in chunk]
            feats = bb.encode(np.stack([w.samples for w in waves]), [w.valid_len for w in waves])
            taps = np.stack([t.data for t in feats.per_layer], axis=1).astype(np.float32)
            n_valid = feats.mask.sum(axis=1)
            for row, i in enumerate(chunk):
                arr = np.ascontiguousarray(taps[row, :, : n_valid[row]])
                ctx.store.put(fp, recipes[i][1], arr)
                found[i] = arr
        return found

    def features(self, items: list[Item], epoch: int, ctx: RunContext, train: bool) -> dict[str, FrameFeatures]:
        ctx = ctx or RunContext()
        return {s.name: self._encode(s, self._stream_waves(s.name, items, epoch, ctx, train), ctx) for s in self.streams()}

    # ---------------------------------------------------------------- training

    def forward(self, items: list[Item], ctx: RunContext, epoch: int = 0, train: bool = False) -> Tensor:
        return self.logits_from(self.features(items, epoch, ctx, train))

    def loss(self, items: list[Item], ctx: RunContext, epoch: int = 0, train: bool = True) -> Tensor:
        y = np.array([it.label for it in items], dtype=np.float64)
        return bce_loss(self.forward(items, ctx, epoch, train), y)

    def predict(self, items: list[Item], ctx: RunContext | None = None) -> Prediction:
        ctx = ctx or RunContext()
        logits = []
        with nd.no_grad():
            for start in range(0, len(items), ctx.eval_batch):
                logits.append(self.forward(items[start : start + ctx.eval_batch], ctx).data)
        logit = np.concatenate(logits)
        return Prediction(nd._sigmoid_np(logit), logit)

    def expand_items(self, items: list[Item]) -> list[Item]:
        return items


class SingleSource(Strategy):
    """One backbone, attention pooling, head (sentence, vowel or mixed)."""

    _STREAM = {"single-sent": "sentence", "single-vowel": "vowel", "single-mix": "mixed"}

    def __init__(self, spec: StrategySpec):
        if spec.kind not in self._STREAM:
            raise ValueError(f"{spec.kind} is not a single-source strategy")
        self.spec = spec
        self.stream_name = self._STREAM[spec.kind]
        seed = spec.vowel_seed if self.stream_name == "vowel" else spec.sentence_seed
        self.backbone, self.layer_weights = self._make_backbone(seed)
        rng = np.random.default_rng(np.random.SeedSequence([spec.init_seed, 0x5E]))
        d = spec.backbone.d
        self.pool = AttentionPool(d)
        self.head = DecisionHead(d, rng)

    def streams(self):
        return [_Stream(self.stream_name, self.backbone, self.layer_weights)]

    def logits_from(self, feats):
        return self.head(self.pool(feats[self.stream_name]))

    def expand_items(self, items):
        """SingleMix trains on every recording as its own item."""
        if self.stream_name != "mixed":
            return items
        return [Item(f"{it.item_id}/{src}", it.label, {src: it.waves[src]}) for it in items for src in sorted(it.waves)]


class WaveformConcat(Strategy):
    def __init__(self, spec: StrategySpec):
        self.spec = spec
        self.backbone, self.layer_weights = self._make_backbone(spec.sentence_seed)
        rng = np.random.default_rng(np.random.SeedSequence([spec.init_seed, 0x3C]))
        self.pool = AttentionPool(spec.backbone.d)
        self.head = DecisionHead(spec.backbone.d, rng)

    def streams(self):
        return [_Stream("wc", self.backbone, self.layer_weights)]

    def logits_from(self, feats):
        return self.head(self.pool(feats["wc"]))


class FeatureFusion(Strategy):
    """Separate vowel and sentence backbones joined by one fusion method."""

    def __init__(self, spec: StrategySpec):
        if spec.kind != "iff":
            raise ValueError("FeatureFusion needs kind 'iff'")
        self.spec = spec
        self.backbone_vowel, self.weights_vowel = self._make_backbone(spec.vowel_seed)
        self.backbone_sentence, self.weights_sentence = self._make_backbone(spec.sentence_seed)
        rng = np.random.default_rng(np.random.SeedSequence([spec.init_seed, 0xF0]))
        self.fusion = make_fusion(spec.iff_method, spec.backbone.d, rng, spec.te)
        self.head = DecisionHead(self.fusion.width(), rng)

    def streams(self):
        return [
            _Stream("vowel", self.backbone_vowel, self.weights_vowel),
            _Stream("sentence", self.backbone_sentence, self.weights_sentence),
        ]

    def fuse(self, feats) -> FusedRepresentation:
        return self.fusion(feats["vowel"], feats["sentence"])

    def logits_from(self, feats):
        return self.head(self.fuse(feats))


class DecisionCombination:
    """Mean of the probabilities of two independently trained members."""

    def __init__(self, spec: StrategySpec, sentence: SingleSource | None = None, vowel: SingleSource | None = None):
        self.spec = spec
        kw = {k: v for k, v in asdict(spec).items() if k not in ("kind", "iff_method")}
        self.sentence = sentence or SingleSource(StrategySpec(kind="single-sent", **kw))
        self.vowel = vowel or SingleSource(StrategySpec(kind="single-vowel", **kw))

    @property
    def members(self) -> dict[str, SingleSource]:
        return {"sentence": self.sentence, "vowel": self.vowel}

    def predict(self, items: list[Item], ctx: RunContext | None = None) -> Prediction:
        if self.sentence is None or self.vowel is None:
            raise ValueError("decision-level combination needs both members")
        return combine_predictions(self.sentence.predict(items, ctx), self.vowel.predict(items, ctx))

    def expand_items(self, items):
        return items


def combine_predictions(a: Prediction, b: Prediction) -> Prediction:
    y = (a.y_hat + b.y_hat) / 2.0
    with np.errstate(divide="ignore"):
        logit = np.log(y) - np.log1p(-y)
    return Prediction(y, logit)


def build_model(spec: StrategySpec):
    if spec.kind == "iff":
        return FeatureFusion(spec)
    if spec.kind == "wc":
        return WaveformConcat(spec)
    if spec.kind == "dlc":
        return DecisionCombination(spec)
    return SingleSource(spec)


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, model: Strategy) -> None:
    """``.npz`` with one array per named parameter plus a JSON header.

    The header (key ``__meta__``) holds the format tag and the StrategySpec,
    so a checkpoint alone rebuilds its model.
    """
    meta = {"format": CHECKPOINT_FORMAT, "spec": model.spec.to_dict()}
    arrays = {name: p.data for name, p in model.named_parameters()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)


def load_checkpoint(path) -> Strategy:
    with np.load(Path(path), allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"unsupported checkpoint format {meta.get('format')!r}")
        model = build_model(StrategySpec.from_dict(meta["spec"]))
        model.load_state_dict({k: z[k] for k in z.files if k != "__meta__"})
    return model
