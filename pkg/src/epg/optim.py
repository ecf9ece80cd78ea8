"""Optimizers, running input normalization, and linear annealing schedules."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    """Adam moment estimates for one flat parameter vector."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, dim: int, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> "AdamState":
        return cls(m=np.zeros(dim), v=np.zeros(dim), t=0,
                   beta1=beta1, beta2=beta2, eps=eps)


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray,
              lr: float) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam descent step; fails fast on non-finite grads."""
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ValueError("adam_step: parameter/gradient/moment length mismatch")
    if not np.all(np.isfinite(grads)):
        raise FloatingPointError("adam_step: non-finite gradient")
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new_params = params - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new_params, AdamState(m=m, v=v, t=t, beta1=state.beta1,
                                 beta2=state.beta2, eps=state.eps)


def sgd_step(params: np.ndarray, grads: np.ndarray, lr: float) -> np.ndarray:
    """Plain gradient descent step."""
    if not np.all(np.isfinite(grads)):
        raise FloatingPointError("sgd_step: non-finite gradient")
    return params - lr * grads


class RunningNormalizer:
    """Streaming per-dimension mean/variance (Welford), with clipped z-scoring.

    Population variance; ``normalize`` never folds its argument into the
    statistics. Before any update it passes values through unchanged.
    """

    def __init__(self, dim: int, clip: float = 5.0):
        self.count = 0
        self.mean = np.zeros(dim)
        self._m2 = np.zeros(dim)
        self.clip = clip
        self._scale = None  # cached 1/max(std, 1e-8)

    @property
    def var(self) -> np.ndarray:
        if self.count == 0:
            return np.zeros_like(self._m2)
        return self._m2 / self.count

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.var)

    def update(self, x) -> None:
        if type(x) is not np.ndarray:
            x = np.asarray(x, dtype=np.float64)
        self.count += 1
        delta = x - self.mean
        self.mean += delta / self.count
        self._m2 += delta * (x - self.mean)
        self._scale = None

    def normalize(self, x) -> np.ndarray:
        if type(x) is not np.ndarray:
            x = np.asarray(x, dtype=np.float64)
        if self.count == 0:
            return x.copy()
        if self._scale is None:
            self._scale = 1.0 / np.maximum(np.sqrt(self._m2 / self.count), 1e-8)
        z = (x - self.mean) * self._scale
        return np.minimum(np.maximum(z, -self.clip), self.clip)


@dataclass
class LinearSchedule:
    """Affine interpolation from start to end over end_epoch epochs, then flat."""

    start: float
    end: float
    end_epoch: int

    def value(self, epoch: int) -> float:
        if epoch < 0:
            raise ValueError("epoch must be non-negative")
        if epoch == 0 or self.end_epoch == 0:
            return self.end if self.end_epoch == 0 else self.start
        if epoch >= self.end_epoch:
            return self.end
        return self.start + (self.end - self.start) * (epoch / self.end_epoch)
