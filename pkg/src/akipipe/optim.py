"""Moment-based (Adam) parameter updates over named tensor sets."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .encoder import ParameterSet


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def init_adam(params: ParameterSet) -> AdamState:
    return AdamState(
        step=0,
        m={k: np.zeros_like(t) for k, t in params.tensors.items()},
        v={k: np.zeros_like(t) for k, t in params.tensors.items()},
    )


def adam_step(
    params: ParameterSet,
    grads: dict[str, np.ndarray],
    state: AdamState,
    learning_rate: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One in-place bias-corrected update; tensors without grads stay put."""
    state.step += 1
    t = state.step
    correction1 = 1.0 - beta1**t
    correction2 = 1.0 - beta2**t
    for name, grad in grads.items():
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * grad
        v *= beta2
        v += (1.0 - beta2) * grad * grad
        m_hat = m / correction1
        v_hat = v / correction2
        params.tensors[name] -= (learning_rate * m_hat / (np.sqrt(v_hat) + eps)).astype(
            params.tensors[name].dtype
        )
