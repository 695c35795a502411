"""Adam and SGD-with-momentum over named parameter groups, plus step-decay milestones."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from tafenet.tensor import Tensor


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class OptimizerState:
    kind: str
    group_lr: dict[str, float]
    groups: dict[str, list[str]]
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    momentum: float = 0.9
    step: int = 0
    buffers: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    base_lr: dict[str, float] = field(default_factory=dict)
    milestones_passed: int = 0
    last_time: int | None = None

    def __post_init__(self):
        if self.kind not in ("adam", "sgd-momentum"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if not self.base_lr:
            self.base_lr = dict(self.group_lr)
        unknown = set(self.groups) - set(self.group_lr)
        if unknown:
            raise ValueError(f"no learning rate for groups {sorted(unknown)}")

    def lr_of(self, name: str) -> float:
        for g, names in self.groups.items():
            if name in names:
                return self.group_lr[g]
        raise KeyError(f"parameter {name} belongs to no group")


def make_state(kind: str, groups: Mapping[str, list[str]], lrs: Mapping[str, float], **kw) -> OptimizerState:
    return OptimizerState(kind=kind, groups={k: list(v) for k, v in groups.items()}, group_lr=dict(lrs), **kw)


def _check_grads(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray]) -> None:
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        if not np.isfinite(g).all():
            raise NonFiniteGradient(f"non-finite gradient for parameter {name}")


def _buffer(state: OptimizerState, key: str, name: str, like: np.ndarray) -> np.ndarray:
    slot = state.buffers.setdefault(key, {})
    if name not in slot:
        slot[name] = np.zeros_like(like)
    return slot[name]


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: OptimizerState) -> OptimizerState:
    if state.kind != "adam":
        raise ValueError(f"adam_step on a {state.kind} state")
    _check_grads(params, grads)
    state.step += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = _buffer(state, "m", name, p.data)
        v = _buffer(state, "v", name, p.data)
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        lr = state.lr_of(name)
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    return state


def sgd_momentum_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: OptimizerState) -> OptimizerState:
    if state.kind != "sgd-momentum":
        raise ValueError(f"sgd_momentum_step on a {state.kind} state")
    _check_grads(params, grads)
    state.step += 1
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        vel = _buffer(state, "velocity", name, p.data)
        vel *= state.momentum
        vel += g
        p.data -= (state.lr_of(name) * vel).astype(p.dtype)
    return state


def step(params, grads, state: OptimizerState) -> OptimizerState:
    if state.kind == "adam":
        return adam_step(params, grads, state)
    return sgd_momentum_step(params, grads, state)


@dataclass
class Schedule:
    milestones: tuple[int, ...] = ()
    factor: float = 10.0

    def __post_init__(self):
        self.milestones = tuple(int(m) for m in self.milestones)
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ValueError(f"milestones must be strictly increasing, got {self.milestones}")
        if self.factor <= 0:
            raise ValueError("decay factor must be positive")


def apply_schedule(state: OptimizerState, schedule: Schedule, time: int) -> OptimizerState:
    """Divide every group's lr by ``schedule.factor`` once per milestone reached by ``time``."""
    if state.last_time is not None and time < state.last_time:
        raise ValueError(f"schedule time moved backwards: {time} < {state.last_time}")
    state.last_time = time
    passed = sum(1 for m in schedule.milestones if time >= m)
    while state.milestones_passed < passed:
        for g in state.group_lr:
            state.group_lr[g] /= schedule.factor
        state.milestones_passed += 1
    return state
