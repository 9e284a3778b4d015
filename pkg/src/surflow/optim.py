"""Adam optimizer acting on a flat ParamStore."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import ParamStore


@dataclass
class AdamState:
    """First/second moment estimates plus the step counter."""

    m: np.ndarray
    v: np.ndarray
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0

    @classmethod
    def for_store(cls, store: ParamStore, lr: float, **kwargs) -> "AdamState":
        n = store.n_params
        return cls(m=np.zeros(n), v=np.zeros(n), lr=float(lr), **kwargs)


def adam_step(state: AdamState, store: ParamStore) -> None:
    """One bias-corrected Adam update of ``store.values`` from ``store.grads``."""
    g = store.grads
    if g.size != state.m.size:
        raise ValueError(f"optimizer sized for {state.m.size} params, store has {g.size}")
    state.step_count += 1
    t = state.step_count
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * g
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = state.m / (1.0 - state.beta1**t)
    v_hat = state.v / (1.0 - state.beta2**t)
    store.values -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


def clip_global_norm(grads: np.ndarray, max_norm: float) -> float:
    """Scale ``grads`` in place so the global L2 norm is at most ``max_norm``."""
    norm = float(np.linalg.norm(grads))
    if norm > max_norm and norm > 0.0:
        grads *= max_norm / norm
    return norm
