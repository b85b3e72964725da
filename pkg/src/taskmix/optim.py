"""Adam with bias correction and the warmup-cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, ShapeError
from .tensor import Gradients, Tensor


@dataclass
class AdamState:
    """First/second moment estimates plus the applied-update counter.

    The per-parameter moment dicts are views into one flat buffer each, so
    the update runs as a handful of vectorized passes instead of hundreds
    of small numpy calls.
    """

    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    _flat_m: np.ndarray | None = field(default=None, repr=False)
    _flat_v: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def init(cls, params: dict[str, Tensor], beta1: float = 0.9,
             beta2: float = 0.999, epsilon: float = 1e-8) -> "AdamState":
        total = sum(p.size for p in params.values())
        flat_m = np.zeros(total)
        flat_v = np.zeros(total)
        m = _views(flat_m, params)
        v = _views(flat_v, params)
        return cls(step=0, m=m, v=v, beta1=beta1, beta2=beta2, epsilon=epsilon,
                   _flat_m=flat_m, _flat_v=flat_v)


def _views(flat: np.ndarray, params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    out = {}
    offset = 0
    for name, p in params.items():
        out[name] = flat[offset:offset + p.size].reshape(p.shape)
        offset += p.size
    return out


def _flatten_state(state: AdamState, params: dict[str, Tensor]) -> None:
    """Adopt externally supplied (e.g. checkpoint-loaded) moment dicts."""
    for name, p in params.items():
        if name not in state.m or state.m[name].shape != p.shape:
            raise ShapeError.mismatch(f"adam moments[{name}]", p.shape,
                                      state.m.get(name, np.empty(0)).shape)
    state._flat_m = np.concatenate([state.m[n].ravel() for n in params])
    state._flat_v = np.concatenate([state.v[n].ravel() for n in params])
    state.m = _views(state._flat_m, params)
    state.v = _views(state._flat_v, params)


def adam_step(params: dict[str, Tensor], grads: Gradients, state: AdamState,
              lr: float) -> tuple[dict[str, Tensor], AdamState]:
    """One bias-corrected Adam update; returns fresh parameter tensors.

    Parameters are immutable values, so the update is functional: the
    caller swaps in the returned dict. Zero gradients leave the parameter
    values fixed while still advancing the moment estimates and counter.
    """
    if lr <= 0:
        raise ContractError(f"adam_step needs lr > 0, got {lr}")
    if state._flat_m is None or sum(p.size for p in params.values()) != state._flat_m.size:
        _flatten_state(state, params)
    flat_g = np.empty(state._flat_m.size)
    flat_p = np.empty(state._flat_m.size)
    offset = 0
    for name, p in params.items():
        g = grads.wrt(p)
        if g.shape != p.shape:
            raise ShapeError.mismatch(f"adam_step[{name}]", p.shape, g.shape)
        flat_g[offset:offset + p.size] = g.ravel()
        flat_p[offset:offset + p.size] = p.data.ravel()
        offset += p.size
    t = state.step + 1
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    fm = state.beta1 * state._flat_m + (1.0 - state.beta1) * flat_g
    fv = state.beta2 * state._flat_v + (1.0 - state.beta2) * (flat_g * flat_g)
    flat_p -= lr * (fm / c1) / (np.sqrt(fv / c2) + state.epsilon)
    if not np.all(np.isfinite(flat_p)):
        raise ContractError("adam_step produced non-finite parameters")
    state._flat_m = fm
    state._flat_v = fv
    state.m = _views(fm, params)
    state.v = _views(fv, params)
    state.step = t
    new_params: dict[str, Tensor] = {}
    offset = 0
    for name, p in params.items():
        chunk = flat_p[offset:offset + p.size].reshape(p.shape)
        new_params[name] = Tensor._wrap(chunk, requires_grad=p.requires_grad)
        offset += p.size
    return new_params, state


@dataclass(frozen=True)
class LrSchedule:
    """Linear warmup to base_lr, then cosine decay to final_lr."""

    base_lr: float
    final_lr: float
    warmup_steps: int
    total_steps: int

    def __post_init__(self):
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ConfigError(
                f"warmup_steps {self.warmup_steps} outside [0, {self.total_steps}]")
        if self.final_lr > self.base_lr:
            raise ConfigError(
                f"final_lr {self.final_lr} exceeds base_lr {self.base_lr}")
        if self.base_lr <= 0 or self.final_lr <= 0:
            raise ConfigError("learning rates must be positive")


def lr_at(schedule: LrSchedule, step: int) -> float:
    """Learning rate at a step.

    Warmup ramps as base_lr * (step + 1) / warmup_steps so the rate is
    positive from step 0 and hits base_lr exactly at the end of warmup;
    the cosine then decays to final_lr at total_steps. Steps beyond
    total_steps clamp to final_lr.
    """
    step = int(step)
    if step < 0:
        raise ContractError(f"negative step {step}")
    if step > schedule.total_steps:
        return schedule.final_lr
    if step < schedule.warmup_steps:
        return schedule.base_lr * (step + 1) / schedule.warmup_steps
    span = schedule.total_steps - schedule.warmup_steps
    if span == 0:
        return schedule.final_lr if step == schedule.total_steps else schedule.base_lr
    t = (step - schedule.warmup_steps) / span
    return schedule.final_lr + (schedule.base_lr - schedule.final_lr) * 0.5 * (
        1.0 + math.cos(math.pi * t)
    )
