"""SGD (with optional momentum) and AdamW with decoupled weight decay."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .autograd import Tensor


def sgd_step(theta, grad, lr, momentum=0.0, velocity=None):
    """Returns ``(new_theta, new_velocity)``."""
    theta = np.asarray(theta, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if momentum:
        velocity = np.zeros_like(theta) if velocity is None else velocity
        velocity = momentum * velocity + grad
        return theta - lr * velocity, velocity
    return theta - lr * grad, velocity


def adamw_step(theta, grad, m, v, t, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
    """One AdamW update at step ``t`` (1-based). Returns ``(theta, m, v)``."""
    theta = np.asarray(theta, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    b1, b2 = betas
    theta = theta - lr * weight_decay * theta
    m = b1 * m + (1 - b1) * grad
    v = b2 * v + (1 - b2) * grad * grad
    m_hat = m / (1 - b1**t)
    v_hat = v / (1 - b2**t)
    return theta - lr * m_hat / (np.sqrt(v_hat) + eps), m, v


class SGD:
    def __init__(self, params: Sequence[Tensor], lr=0.01, momentum=0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self._vel = [None] * len(self.params)

    def step(self):
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            p.data, self._vel[i] = sgd_step(p.data, p.grad, self.lr, self.momentum, self._vel[i])

    def zero_grad(self):
        for p in self.params:
            p.grad = None


class AdamW:
    def __init__(self, params: Sequence[Tensor], lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.params = list(params)
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        for i, p in enumerate(self.params):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            p.data, self._m[i], self._v[i] = adamw_step(
                p.data, g, self._m[i], self._v[i], self.t, self.lr, self.betas, self.eps, self.weight_decay)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def make_optimizer(tag: str, params, **hyper):
    tag = tag.lower()
    if tag == "sgd":
        return SGD(params, **hyper)
    if tag == "adamw":
        return AdamW(params, **hyper)
    raise ValueError(f"unknown optimizer {tag!r}")
