"""Adam with bias correction, deterministic given identical inputs."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, TensorError


class OptimizerState:
    """Per-parameter moment accumulators plus the shared step counter."""

    def __init__(self, params, learning_rate=1e-3, beta1=0.9, beta2=0.999,
                 epsilon=1e-8):
        self.params = list(params)
        for p in self.params:
            if not isinstance(p, Tensor) or not p.requires_grad:
                raise TensorError("optimizer parameters must require grad")
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.step_count = 0
        self.learning_rate = float(learning_rate)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.epsilon = float(epsilon)


def adam_update(state):
    """One in-place update over all parameters; grads must be populated."""
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    for i, p in enumerate(state.params):
        if p.grad is None:
            raise TensorError(f"parameter {i} has no gradient; run backward first")
        g = p.grad
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * (g * g)
        m_hat = state.m[i] / (1.0 - b1**t)
        v_hat = state.v[i] / (1.0 - b2**t)
        step = state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
        p.data -= step.astype(p.dtype, copy=False)
    return state


def zero_grads(params):
    for p in params:
        p.grad = None
