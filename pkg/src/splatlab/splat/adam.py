"""Adam with per-group learning rates and post-step domain projections."""

from __future__ import annotations

import numpy as np

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-15


class AdamState:
    """First/second moment buffers for one parameter tensor."""

    def __init__(self, shape):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState, lr: float) -> None:
    """One bias-corrected adaptive update, in place."""
    state.t += 1
    state.m = BETA1 * state.m + (1.0 - BETA1) * grad
    state.v = BETA2 * state.v + (1.0 - BETA2) * grad * grad
    m_hat = state.m / (1.0 - BETA1 ** state.t)
    v_hat = state.v / (1.0 - BETA2 ** state.t)
    param -= lr * m_hat / (np.sqrt(v_hat) + EPS)


class AdamGroup:
    """A named set of (tensor, grad-getter) pairs sharing a learning rate."""

    def __init__(self, params_and_grads, lr: float):
        self.items = list(params_and_grads)
        self.lr = lr
        self.states = [AdamState(p.shape) for p, _ in self.items]

    def step(self):
        for (param, grad), state in zip(self.items, self.states):
            adam_step(param, grad, state, self.lr)
