"""AdamW with decoupled weight decay.

Decay is applied multiplicatively to the parameter before the Adam update,
so it never enters the moment estimates. Parameters whose gradient is absent
for a step are skipped entirely: no decay, no moment update, no step-count
advance for that parameter.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError, Tensor


@dataclass
class OptimState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


class AdamW:
    def __init__(self, params: list[Tensor], lr: float, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.state = [OptimState(m=np.zeros_like(p.data), v=np.zeros_like(p.data))
                      for p in self.params]

    def step(self):
        for p, st in zip(self.params, self.state):
            if p.grad is None:
                continue
            g = p.grad
            if g.shape != p.data.shape:
                raise ShapeError(f"adamw step: grad shape {g.shape} != param {p.data.shape}")
            st.step += 1
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            st.m = self.beta1 * st.m + (1.0 - self.beta1) * g
            st.v = self.beta2 * st.v + (1.0 - self.beta2) * (g * g)
            m_hat = st.m / (1.0 - self.beta1 ** st.step)
            v_hat = st.v / (1.0 - self.beta2 ** st.step)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None
