"""Adam optimizer with decoupled weight decay.

Moments are stored in one packed buffer per run so an update is a handful of
vectorized passes regardless of how many parameter groups exist; the public
interface still works in named parameter dicts.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DivergenceError


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    layout: list[tuple[str, tuple[int, ...], int, int]] = field(default_factory=list)
    m: np.ndarray = field(default_factory=lambda: np.zeros(0))
    v: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @classmethod
    def init(cls, params: dict[str, np.ndarray], lr: float, weight_decay: float = 0.0,
             beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        layout = []
        offset = 0
        for name, p in params.items():
            layout.append((name, p.shape, offset, offset + p.size))
            offset += p.size
        return cls(
            lr=lr, beta1=beta1, beta2=beta2, eps=eps, weight_decay=weight_decay,
            layout=layout, m=np.zeros(offset), v=np.zeros(offset),
        )

    def _pack(self, arrays: dict[str, np.ndarray]) -> np.ndarray:
        out = np.empty(self.m.size)
        for name, _, lo, hi in self.layout:
            out[lo:hi] = arrays[name].ravel()
        return out

    def _unpack(self, flat: np.ndarray) -> dict[str, np.ndarray]:
        return {
            name: flat[lo:hi].reshape(shape)
            for name, shape, lo, hi in self.layout
        }


def adam_step(
    state: AdamState,
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
) -> dict[str, np.ndarray]:
    """One Adam update; returns new parameter arrays, mutating only ``state``.

    Weight decay is decoupled (applied directly to parameters, not folded into
    the gradient), which reduces to plain Adam when weight_decay == 0.
    Non-finite gradients abort with DivergenceError.
    """
    g = state._pack(grads)
    if not np.all(np.isfinite(g)):
        raise DivergenceError("diverged: non-finite gradient")
    p = state._pack(params)
    state.step_count += 1
    t = state.step_count
    m, v = state.m, state.v
    m *= state.beta1
    m += (1.0 - state.beta1) * g
    np.square(g, out=g)
    v *= state.beta2
    v += (1.0 - state.beta2) * g
    denom = np.sqrt(v / (1.0 - state.beta2**t))  # v_hat
    denom += state.eps
    update = m / denom
    update *= state.lr / (1.0 - state.beta1**t)
    new = p - update
    if state.weight_decay > 0.0:
        new -= (state.lr * state.weight_decay) * p
    return state._unpack(new)
