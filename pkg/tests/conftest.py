import numpy as np
import pytest
from hypothesis import settings

from mvp import ndcore as nd
from mvp.backbone import FrameFeatures

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_features(rng, B, T, d, source="sentence", n_valid=None, grad=False):
    H = rng.normal(size=(B, T, d))
    mask = None
    if n_valid is not None:
        mask = np.arange(T)[None, :] < np.asarray(n_valid)[:, None]
        H = H * mask[..., None]
    t = nd.Parameter(H) if grad else nd.Tensor(H)
    return FrameFeatures(t, mask, source)


def auc_bruteforce(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def tiny_backbone(**kw):
    from mvp.backbone import BackboneConfig

    base = dict(d=8, num_layers=2, num_heads=2, n_bands=8, extraction="last")
    base.update(kw)
    return BackboneConfig(**base)


def tiny_spec(name, **kw):
    from mvp.model import StrategySpec

    kw.setdefault("backbone", tiny_backbone())
    kw.setdefault("seconds", 0.1)
    return StrategySpec.from_name(name, **kw)


def toy_items(n, seed=0, rate=16000, seconds=0.1):
    """Linearly separable toy set: the class sets the tone frequency of both recordings."""
    from mvp.audio import Waveform
    from mvp.model import Item

    rng = np.random.default_rng(seed)
    t = np.arange(int(rate * seconds)) / rate
    items = []
    for i in range(n):
        y = i % 2
        waves = {}
        for src, base in (("vowel", 300.0), ("sentence", 500.0)):
            f = base * (4.0 if y else 1.0) * rng.uniform(0.95, 1.05)
            x = np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi)) + 0.05 * rng.normal(size=t.size)
            waves[src] = Waveform(x, rate)
        items.append(Item(f"s{i:03d}", y, waves))
    return items


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
