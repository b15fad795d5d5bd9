"""AdamW with decoupled weight decay, and the per-fold training loop."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import ndcore as nd
from .ndcore import Parameter


@dataclass
class TrainConfig:
    lr: float = 5e-5
    weight_decay: float = 0.01
    epochs: int = 10
    patience: int = 5
    batch_size: int = 64
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    grad_accum: int = 1

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.lr <= 0 or self.eps <= 0 or self.weight_decay < 0:
            raise ValueError("lr and eps must be positive, weight_decay non-negative")
        if min(self.epochs, self.patience, self.batch_size, self.grad_accum) < 1:
            raise ValueError("epochs, patience, batch_size and grad_accum must be >= 1")
        if self.patience > self.epochs:
            raise ValueError(f"patience {self.patience} exceeds epochs {self.epochs}")
        if not all(0.0 <= b < 1.0 for b in self.betas):
            raise ValueError(f"betas must lie in [0, 1), got {self.betas}")


class AdamW:
    """Adam moments with bias correction; decay ``θ -= lr·wd·θ`` applied apart
    from the adaptive step."""

    def __init__(self, params: list[Parameter], cfg: TrainConfig):
        self.params = list(params)
        self.cfg = cfg
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.rejected = 0

    def step(self) -> bool:
        """Apply one update; returns False (and changes nothing) on non-finite grads."""
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in self.params]
        if not all(np.isfinite(g).all() for g in grads):
            self.rejected += 1
            return False
        cfg = self.cfg
        b1, b2 = cfg.betas
        self.t += 1
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= cfg.lr * cfg.weight_decay * p.data
            p.data -= cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        return True

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state_dict(self) -> dict:
        return {"t": self.t, "m": [a.copy() for a in self.m], "v": [a.copy() for a in self.v]}

    def load_state_dict(self, state: dict) -> None:
        if len(state["m"]) != len(self.params):
            raise ValueError("optimizer state does not match the parameter list")
        self.t = int(state["t"])
        self.m = [np.array(a, dtype=np.float64) for a in state["m"]]
        self.v = [np.array(a, dtype=np.float64) for a in state["v"]]


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Batch order for one epoch, a pure function of (seed, epoch)."""
    return np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, epoch, 0x5F])).permutation(n)


@dataclass
class TrainResult:
    best_epoch: int
    best_val_loss: float
    best_state: dict[str, np.ndarray]
    log: list[dict] = field(default_factory=list)
    rejected_steps: int = 0

    @property
    def epochs_run(self) -> int:
        return len(self.log)


def train_fold(model, train_items, val_items, cfg: TrainConfig, ctx=None, log_path=None) -> TrainResult:
    """Train ``model`` in place and restore the parameters of its best epoch.

    ``model`` needs ``named_trainable()``, ``loss(items, ctx, epoch, train)``
    and ``expand_items(items)``. Training stops once ``patience`` consecutive
    epochs fail to improve the validation loss.
    """
    train_items = model.expand_items(list(train_items))
    val_items = model.expand_items(list(val_items))
    if not train_items or not val_items:
        raise ValueError("train and validation splits must both be non-empty")
    named = model.named_trainable()
    opt = AdamW([p for _, p in named], cfg)
    best_val, best_epoch, best_state, bad = math.inf, 0, None, 0
    log: list[dict] = []
    eval_ctx = None if ctx is None else type(ctx)(aug=None, seed=ctx.seed, store=ctx.store, eval_batch=ctx.eval_batch)
    for epoch in range(1, cfg.epochs + 1):
        order = epoch_order(len(train_items), cfg.seed, epoch)
        batches = [order[i : i + cfg.batch_size] for i in range(0, len(order), cfg.batch_size)]
        total, count = 0.0, 0
        opt.zero_grad()
        for b, idx in enumerate(batches):
            items = [train_items[i] for i in idx]
            loss = model.loss(items, ctx, epoch, True)
            group = min(cfg.grad_accum, len(batches) - (b // cfg.grad_accum) * cfg.grad_accum)
            nd.backward(loss * (1.0 / group))
            total += loss.item() * len(items)
            count += len(items)
            if (b + 1) % cfg.grad_accum == 0 or b + 1 == len(batches):
                opt.step()
                opt.zero_grad()
        val_loss = evaluate_loss(model, val_items, eval_ctx, cfg.batch_size)
        record = {"epoch": epoch, "train_loss": total / count, "val_loss": val_loss}
        log.append(record)
        if log_path is not None:
            with open(log_path, "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
        if best_state is None or val_loss < best_val:
            best_val, best_epoch, bad = val_loss, epoch, 0
            best_state = {n: p.data.copy() for n, p in named}
        else:
            bad += 1
            if bad >= cfg.patience:
                break
    for n, p in named:
        p.data[...] = best_state[n]
    return TrainResult(best_epoch, best_val, best_state, log, opt.rejected)


def evaluate_loss(model, items, ctx, batch_size: int) -> float:
    total = 0.0
    with nd.no_grad():
        for i in range(0, len(items), batch_size):
            chunk = items[i : i + batch_size]
            total += model.loss(chunk, ctx, 0, False).item() * len(chunk)
    return total / len(items)


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
