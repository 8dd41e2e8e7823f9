"""Adam with exponential learning-rate decay, mini-batching, early stopping."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np

from .objectives import ModelPair, ObjectiveConfig, training_loss
from .tensor import backward

log = logging.getLogger(__name__)


def lr_schedule(t: int, T: int, lr0: float) -> float:
    """``lr0 * 0.1 ** (t / (T - 1))`` for ``0 <= t < T``."""
    if t < 0 or t >= T:
        raise ValueError(f"iteration {t} outside [0, {T})")
    if T == 1:
        return lr0
    return lr0 * 0.1 ** (t / (T - 1))


@dataclass
class TrainConfig:
    lr0: float = 1e-3
    total_iters: int = 1000
    batch_size: int = 100
    eval_every: int = 100
    eval_k: int = 64
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not self.lr0 > 0:
            raise ValueError("lr0 must be positive")
        if self.total_iters < 1:
            raise ValueError("total_iters must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.eval_every < 1:
            raise ValueError("eval_every must be at least 1")
        if self.eval_k < 1:
            raise ValueError("eval_k must be at least 1")

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> tuple[dict, AdamState]:
    """One bias-corrected Adam update, applied in place.

    ``params`` maps names to tensors, ``grads`` maps the same names to arrays.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    c1 = 1.0 - state.beta1**state.step
    c2 = 1.0 - state.beta2**state.step
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        if m.shape != p.data.shape:
            raise ValueError(f"Adam moment shape {m.shape} does not match parameter {name!r}")
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


@dataclass
class TrainHistory:
    rows: list = field(default_factory=list)  # (iteration, train_loss, val_bound)
    best_iteration: int = -1
    best_val: float = -np.inf
    best_state: dict | None = None

    def record(self, iteration: int, train_loss: float, val_bound: float, state: dict) -> None:
        self.rows.append((iteration, train_loss, val_bound))
        if val_bound > self.best_val:
            self.best_val = val_bound
            self.best_iteration = iteration
            self.best_state = state

    def __len__(self) -> int:
        return len(self.rows)

    def to_csv_rows(self) -> list[tuple]:
        return list(self.rows)


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, history: TrainHistory):
        super().__init__(message)
        self.history = history


def train(model: ModelPair, data, ocfg: ObjectiveConfig, tcfg: TrainConfig) -> TrainHistory:
    """Optimize ``model`` and leave it holding the best-validation parameters.

    Validation is measured on the pre-update parameters at every
    ``eval_every``-th iteration and once more after the final update.
    """
    # local import: evaluation depends on objectives, not on training
    from .evaluation import amortized_bound

    x_train, x_val = np.asarray(data.train), np.asarray(data.val)
    if len(x_train) == 0 or len(x_val) == 0:
        raise ValueError("training needs non-empty train and validation splits")
    rng = np.random.default_rng([tcfg.seed, 0])
    val_seed = (tcfg.seed, 1)
    params = model.parameters()
    names = list(params)
    tensors = [params[n] for n in names]
    state = AdamState(tcfg.beta1, tcfg.beta2, tcfg.adam_eps)
    history = TrainHistory()
    order = np.empty(0, dtype=np.int64)
    cursor = 0
    n = len(x_train)
    batch_size = min(tcfg.batch_size, n)
    T = tcfg.total_iters
    loss_value = float("nan")

    def checkpoint(iteration: int, loss: float) -> None:
        val = amortized_bound(model, x_val, tcfg.eval_k, reps=1, seed=val_seed)
        if not np.isfinite(val):
            raise TrainingDiverged(f"non-finite validation bound at iteration {iteration}", history)
        history.record(iteration, loss, val, model.state())
        log.info("iter %d train_loss %.4f val_bound %.4f", iteration, loss, val)

    for t in range(T):
        if cursor + batch_size > len(order):
            order = rng.permutation(n)
            cursor = 0
        idx = order[cursor : cursor + batch_size]
        cursor += batch_size
        try:
            loss = training_loss(model, x_train[idx], ocfg, rng)
        except FloatingPointError as exc:
            raise TrainingDiverged(f"iteration {t}: {exc}", history) from exc
        loss_value = loss.item()
        if not np.isfinite(loss_value):
            raise TrainingDiverged(f"non-finite training loss at iteration {t}", history)
        if t % tcfg.eval_every == 0:
            checkpoint(t, loss_value)
        grads = backward(loss, tensors)
        try:
            adam_step(params, {n: grads[p] for n, p in zip(names, tensors)}, state, lr_schedule(t, T, tcfg.lr0))
        except FloatingPointError as exc:
            raise TrainingDiverged(f"iteration {t}: {exc}", history) from exc
    if T > 1:
        checkpoint(T, loss_value)
    model.load_state(history.best_state)
    return history
