"""AdamW, global-norm clipping and parameter EMA over named parameters."""
from __future__ import annotations

from collections import OrderedDict
from typing import Mapping

import numpy as np

from .tensor import Tensor


class AdamW:
    """Decoupled weight decay Adam; state is keyed by parameter name."""

    def __init__(self, params: Mapping[str, Tensor], lr: float, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = OrderedDict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            if not p.requires_grad:
                continue
            g = np.zeros_like(p.data) if p.grad is None else p.grad
            m = self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            v = self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data = p.data * (1.0 - self.lr * self.weight_decay) - self.lr * update

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v}

    def load_state(self, t: int, m: Mapping[str, np.ndarray], v: Mapping[str, np.ndarray]) -> None:
        self.t = int(t)
        for k in self.params:
            self.m[k] = np.array(m[k], dtype=np.float64)
            self.v[k] = np.array(v[k], dtype=np.float64)


def global_grad_norm(params: Mapping[str, Tensor]) -> float:
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    return float(np.sqrt(total))


def clip_grad_norm(params: Mapping[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = global_grad_norm(params)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


def ema_update(params: Mapping[str, np.ndarray], ema: dict[str, np.ndarray], decay: float) -> dict[str, np.ndarray]:
    """ema <- decay * ema + (1 - decay) * params, in place on ``ema``."""
    for k, p in params.items():
        ema[k] = decay * ema[k] + (1.0 - decay) * np.asarray(p)
    return ema
