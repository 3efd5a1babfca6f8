from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class AdamState:
    lr: float = 1e-1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState) -> list[np.ndarray]:
    """One bias-corrected Adam update. Returns new parameter arrays; ``state`` is advanced in place.

    A non-finite gradient rejects the whole step and leaves ``state`` untouched.
    """
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ValueError(f"gradient {i} has shape {g.shape}, parameter has {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for parameter {i}")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]

    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        m = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[i] + (1.0 - state.beta2) * (g * g)
        state.m[i], state.v[i] = m, v
        out.append(p - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps))
    return out


class Adam:
    """Adam over a fixed list of leaf tensors, using their accumulated ``.grad``."""

    def __init__(self, params: list[Tensor], lr: float = 1e-1, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in self.params]
        new = adam_step([p.data for p in self.params], grads, self.state)
        for p, d in zip(self.params, new):
            p.data = d
