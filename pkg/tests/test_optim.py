import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mvp import ndcore as nd
from mvp.ndcore import Parameter
from mvp.optim import AdamW, TrainConfig, epoch_order, train_fold


def _step(p, grad, opt):
    p.grad = np.asarray(grad, dtype=np.float64)
    return opt.step()


def test_pure_decay_with_zero_grad():
    p = Parameter([1.0])
    opt = AdamW([p], TrainConfig())
    _step(p, [0.0], opt)
    assert p.data[0] == pytest.approx(0.9999995, abs=1e-15)


def test_first_step_closed_form():
    p = Parameter([0.0])
    cfg = TrainConfig(weight_decay=0.0)
    _step(p, [0.5], AdamW([p], cfg))
    assert p.data[0] == pytest.approx(-cfg.lr * 0.5 / (0.5 + 1e-8), rel=1e-12)
    assert p.data[0] == pytest.approx(-cfg.lr, rel=1e-7)


def test_two_steps_match_scalar_reference():
    cfg = TrainConfig(lr=1e-3, weight_decay=0.01)
    p = Parameter([0.7])
    opt = AdamW([p], cfg)
    theta, m, v = 0.7, 0.0, 0.0
    for t in (1, 2):
        g = 0.3
        _step(p, [g], opt)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        theta -= cfg.lr * cfg.weight_decay * theta
        theta -= cfg.lr * (m / (1 - 0.9**t)) / (math.sqrt(v / (1 - 0.999**t)) + 1e-8)
        assert p.data[0] == pytest.approx(theta, abs=1e-15)
    assert opt.t == 2


def test_non_finite_gradient_rejected():
    p = Parameter([1.0, 2.0])
    opt = AdamW([p], TrainConfig())
    assert not _step(p, [np.nan, 0.0], opt)
    assert opt.rejected == 1 and opt.t == 0
    np.testing.assert_array_equal(p.data, [1.0, 2.0])


@given(st.integers(1, 20), st.floats(1e-5, 1e-2), st.floats(0.0, 0.5))
def test_decay_contracts_norm_exactly(steps, lr, wd):
    rng = np.random.default_rng(steps)
    p = Parameter(rng.normal(size=5))
    opt = AdamW([p], TrainConfig(lr=lr, weight_decay=wd))
    norm = np.linalg.norm(p.data)
    for _ in range(steps):
        _step(p, np.zeros(5), opt)
        norm *= 1 - lr * wd
    assert np.linalg.norm(p.data) == pytest.approx(norm, rel=1e-12)


def test_state_round_trip_is_bitwise():
    rng = np.random.default_rng(0)
    p = Parameter(rng.normal(size=(3, 2)))
    opt = AdamW([p], TrainConfig(lr=1e-2))
    for _ in range(3):
        _step(p, rng.normal(size=(3, 2)), opt)
    state = opt.state_dict()
    q = Parameter(p.data.copy())
    opt2 = AdamW([q], TrainConfig(lr=1e-2))
    opt2.load_state_dict(state)
    g = rng.normal(size=(3, 2))
    _step(p, g, opt)
    _step(q, g, opt2)
    assert p.data.tobytes() == q.data.tobytes()
    with pytest.raises(ValueError):
        AdamW([p, q], TrainConfig()).load_state_dict(state)


@given(st.integers(1, 50), st.integers(0, 2**31), st.integers(1, 20))
def test_epoch_order_is_pure_permutation(n, seed, epoch):
    a = epoch_order(n, seed, epoch)
    assert np.array_equal(a, epoch_order(n, seed, epoch))
    assert sorted(a.tolist()) == list(range(n))


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(patience=11, epochs=10)
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)


class ScriptedModel:
    """Validation loss follows a script; training loss is a real quadratic."""

    def __init__(self, val_losses):
        self.w = Parameter([1.0])
        self.val_losses = list(val_losses)
        self.calls = 0

    def named_trainable(self):
        return [("w", self.w)]

    def expand_items(self, items):
        return items

    def loss(self, items, ctx, epoch, train):
        if train:
            return (self.w * self.w).sum()
        return nd.Tensor(self.val_losses[epoch_counter(self)])


def epoch_counter(model):
    model.calls += 1
    return model.calls - 1


def test_early_stop_after_patience_plus_one_worsening_epochs(tmp_path):
    model = ScriptedModel([1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0])
    cfg = TrainConfig(lr=0.1, epochs=10, patience=5, batch_size=4)
    res = train_fold(model, [0, 1, 2, 3], [0], cfg, log_path=tmp_path / "log.jsonl")
    assert res.epochs_run == cfg.patience + 1
    assert res.best_epoch == 1
    lines = [json.loads(s) for s in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in lines] == list(range(1, 7))
    assert {"train_loss", "val_loss"} <= set(lines[0])


def test_best_checkpoint_restored_and_not_worse_than_final():
    model = ScriptedModel([3.0, 1.0, 2.0, 2.5, 0.5, 0.7])
    res = train_fold(model, [0, 1], [0], TrainConfig(lr=0.1, epochs=6, patience=3, batch_size=2))
    assert res.best_epoch == 5
    assert res.best_val_loss <= res.log[-1]["val_loss"]
    assert model.w.data.tobytes() == res.best_state["w"].tobytes()


def test_train_fold_determinism_and_empty_split():
    def run():
        m = ScriptedModel([1.0, 0.9, 0.8])
        return train_fold(m, list(range(7)), [0], TrainConfig(lr=0.1, epochs=3, patience=1, batch_size=3)).log

    assert run() == run()
    with pytest.raises(ValueError):
        train_fold(ScriptedModel([1.0]), [], [0], TrainConfig(epochs=1, patience=1))


def test_grad_accumulation_matches_large_batch():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(8, 3))
    y = (X[:, 0] > 0).astype(float)

    class Lin:
        def __init__(self):
            self.w = Parameter(np.zeros(3))

        def named_trainable(self):
            return [("w", self.w)]

        def expand_items(self, items):
            return items

        def loss(self, items, ctx, epoch, train):
            idx = np.array(items)
            return nd.bce_with_logits(nd.matmul(nd.Tensor(X[idx]), self.w.reshape(3, 1)).reshape(len(idx)), y[idx])

    a, b = Lin(), Lin()
    train_fold(a, list(range(8)), [0], TrainConfig(lr=0.1, epochs=1, patience=1, batch_size=8))
    train_fold(b, list(range(8)), [0], TrainConfig(lr=0.1, epochs=1, patience=1, batch_size=4, grad_accum=2))
    np.testing.assert_allclose(a.w.data, b.w.data, atol=1e-12)
