"""Adam with bias correction, applied in place to Tensor parameters"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from numcore.tensor import Tensor
from utils.errors import UsageError


@dataclass
class AdamState:
    """Per-parameter moments (keyed by tensor id) plus the shared step counter"""

    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)


def _lookup(grads: Mapping, param: Tensor) -> np.ndarray:
    if param.tid not in grads:
        raise UsageError(f"no gradient for parameter {param.name or param.tid}")
    g = grads[param.tid]
    return g.data if isinstance(g, Tensor) else np.asarray(g)


def adam_step(params: Sequence[Tensor], grads: Mapping, state: AdamState) -> list[Tensor]:
    """One Adam update over every parameter; all gradients are checked before anything moves"""
    resolved = [_lookup(grads, p) for p in params]
    for p, g in zip(params, resolved):
        if g.shape != p.shape:
            raise UsageError(f"gradient shape {g.shape} does not match parameter {p.name} {p.shape}")

    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for p, g in zip(params, resolved):
        m = state.m.setdefault(p.tid, np.zeros_like(p.data))
        v = state.v.setdefault(p.tid, np.zeros_like(p.data))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return list(params)


class Adam:
    """Optimizer bound to a fixed parameter list"""

    def __init__(self, params: Sequence[Tensor], lr: float = 0.001, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        seen: set[int] = set()
        for p in params:
            if p.tid in seen:
                raise UsageError(f"parameter {p.name or p.tid} registered twice")
            seen.add(p.tid)
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    @property
    def steps(self) -> int:
        return self.state.t

    def step(self, grads: Mapping) -> None:
        adam_step(self.params, grads, self.state)
