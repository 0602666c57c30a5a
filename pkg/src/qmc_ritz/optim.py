"""Parameter updates: bias-corrected Adam, fixed-step descent, l-infinity projection."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .pde import GradEstimate

__all__ = ["AdamState", "adam_init", "adam_step", "fixed_step", "project_inf_ball", "adam_step_bound"]


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(D: int, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> AdamState:
    if lr <= 0 or not (0 <= beta1 < 1) or not (0 <= beta2 < 1) or eps <= 0:
        raise ValueError("invalid Adam hyperparameters")
    return AdamState(np.zeros(D), np.zeros(D), 0, lr, beta1, beta2, eps)


def _as_array(grad) -> np.ndarray:
    g = grad.g if isinstance(grad, GradEstimate) else grad
    return np.asarray(g, dtype=np.float64)


def adam_step(state: AdamState, params, grad) -> tuple[AdamState, np.ndarray]:
    g = _as_array(grad)
    params = np.asarray(params, dtype=np.float64)
    if g.shape != params.shape or g.shape != state.m.shape:
        raise ValueError(f"shape mismatch: params {params.shape}, grad {g.shape}, state {state.m.shape}")
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite gradient passed to Adam")
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new_params = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return replace(state, m=m, v=v, t=t), new_params


def adam_step_bound(state: AdamState, t: int) -> float:
    """Worst-case per-coordinate Adam move at step ``t`` (eps ignored).

    Cauchy-Schwarz on the two moving averages gives
    ``lr (1-b1)/(1-b1^t) sqrt(sum_{j<t} (b1^2/b2)^j) sqrt((1-b2^t)/(1-b2))``;
    it equals ``lr`` at ``t = 1`` and exceeds it later when ``1 - b1 > sqrt(1 - b2)``.
    """
    b1, b2 = state.beta1, state.beta2
    r = b1 * b1 / b2
    geom = t if r == 1.0 else (1.0 - r**t) / (1.0 - r)
    return state.lr * (1 - b1) / (1 - b1**t) * np.sqrt(geom) * np.sqrt((1 - b2**t) / (1 - b2))


def fixed_step(params, grad, alpha: float) -> np.ndarray:
    if not alpha > 0:
        raise ValueError("step size must be positive")
    return np.asarray(params, dtype=np.float64) - alpha * _as_array(grad)


def project_inf_ball(params, B_theta: float) -> np.ndarray:
    if not B_theta > 0:
        raise ValueError("projection radius must be positive")
    return np.clip(np.asarray(params, dtype=np.float64), -B_theta, B_theta)
