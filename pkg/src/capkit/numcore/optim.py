from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import NumericError, Parameter


class NonFiniteGradient(NumericError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient in parameter {name!r}")
        self.name = name


@dataclass
class OptimState:
    """Adam moment estimates keyed by parameter name."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def zero_grad(params: Sequence[Parameter]) -> None:
    for p in params:
        p.grad = np.zeros_like(p.data)


def check_finite(params: Sequence[Parameter]) -> None:
    for p in params:
        if p.grad is None or not np.isfinite(p.grad).all():
            raise NonFiniteGradient(p.name)


def global_grad_norm(params: Sequence[Parameter]) -> float:
    return math.sqrt(math.fsum(float(np.sum(p.grad * p.grad)) for p in params))


def clip_grad_norm(params: Sequence[Parameter], max_norm: float) -> float:
    """Rescale all gradients so their joint L2 norm is at most ``max_norm``."""
    check_finite(params)
    norm = global_grad_norm(params)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in params:
            p.grad *= scale
    return norm


def sgd_step(params: Sequence[Parameter], lr: float) -> None:
    check_finite(params)
    for p in params:
        p.data -= lr * p.grad


def adam_step(
    params: Sequence[Parameter],
    state: OptimState,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    check_finite(params)
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for p in params:
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(p.data)
            state.v[p.name] = np.zeros_like(p.data)
        v = state.v[p.name]
        m *= beta1
        m += (1.0 - beta1) * p.grad
        v *= beta2
        v += (1.0 - beta2) * p.grad * p.grad
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
