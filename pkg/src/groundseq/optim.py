"""Bias-corrected Adam over named parameter dicts, plus global-norm clipping."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, Tensor


@dataclass
class AdamState:
    """Moment estimates keyed by parameter name, shared step counter."""

    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.learning_rate <= 0 or self.eps <= 0:
            raise ValueError("learning_rate and eps must be positive")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("betas must lie in (0, 1)")


def init_adam(params: dict[str, Tensor], learning_rate: float = 3e-4, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    state = AdamState(learning_rate=learning_rate, beta1=beta1, beta2=beta2, eps=eps)
    for name, p in params.items():
        state.first_moment[name] = np.zeros_like(p.data)
        state.second_moment[name] = np.zeros_like(p.data)
    return state


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: AdamState, learning_rate: float | None = None) -> AdamState:
    """One in-place Adam update; parameters whose gradient is identically zero
    are left untouched (moments included), so frozen weights never drift."""
    if set(grads) != set(state.first_moment):
        raise ShapeError("gradient names do not match optimizer state")
    lr = state.learning_rate if learning_rate is None else learning_rate
    state.step_count += 1
    c1 = 1.0 - state.beta1 ** state.step_count
    c2 = 1.0 - state.beta2 ** state.step_count
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.data.shape:
            raise ShapeError(
                f"gradient shape {g.shape} does not match parameter {name} {p.data.shape}")
        if not np.any(g):
            continue
        m = state.first_moment[name]
        v = state.second_moment[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float = 1.0) -> tuple[float, bool]:
    """Scale all gradients in place so their joint L2 norm is at most
    ``max_norm``; returns (pre-clip norm, whether clipping fired).

    Accumulation runs in sorted-name order so the result does not depend on
    dict insertion order; a reloaded run reproduces the same floats."""
    total = 0.0
    for name in sorted(grads):
        g = grads[name]
        total += float((g * g).sum())
    norm = float(np.sqrt(total))
    if norm <= max_norm or norm == 0.0:
        return norm, False
    scale = max_norm / norm
    for g in grads.values():
        g *= scale
    return norm, True
