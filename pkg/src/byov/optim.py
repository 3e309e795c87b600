from __future__ import annotations

from typing import Mapping

import numpy as np

from .autodiff import Tensor


class Optimizer:
    """Updates ``Tensor.data`` in place from ``Tensor.grad``.

    Parameters are addressed by name so state can be checkpointed.
    """

    def __init__(self, params: Mapping[str, Tensor], lr: float, weight_decay: float = 0.0,
                 lr_scales: Mapping[str, float] | None = None):
        self.params = dict(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.lr_scales = dict(lr_scales or {})
        self.t = 0

    def lr_for(self, name: str) -> float:
        return self.lr * self.lr_scales.get(name, 1.0)

    def _grad(self, p: Tensor) -> np.ndarray | None:
        if p.grad is None:
            return None
        return p.grad + self.weight_decay * p.data if self.weight_decay else p.grad

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {"t": np.array(float(self.t))}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        self.t = int(state["t"])


class SGD(Optimizer):
    def __init__(self, params, lr=1e-2, momentum=0.9, weight_decay=0.0, lr_scales=None):
        super().__init__(params, lr, weight_decay, lr_scales)
        self.momentum = momentum
        self.buf = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self) -> None:
        self.t += 1
        for k, p in self.params.items():
            g = self._grad(p)
            if g is None:
                continue
            self.buf[k] = self.momentum * self.buf[k] + g
            p.data -= self.lr_for(k) * self.buf[k]

    def state_dict(self):
        out = super().state_dict()
        out.update({f"buf/{k}": v for k, v in self.buf.items()})
        return out

    def load_state_dict(self, state):
        super().load_state_dict(state)
        for k in self.buf:
            self.buf[k] = np.array(state[f"buf/{k}"])


class Adam(Optimizer):
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0, lr_scales=None):
        super().__init__(params, lr, weight_decay, lr_scales)
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            g = self._grad(p)
            if g is None:
                continue
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            p.data -= self.lr_for(k) * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)

    def state_dict(self):
        out = super().state_dict()
        out.update({f"m/{k}": v for k, v in self.m.items()})
        out.update({f"v/{k}": v for k, v in self.v.items()})
        return out

    def load_state_dict(self, state):
        super().load_state_dict(state)
        for k in self.m:
            self.m[k] = np.array(state[f"m/{k}"])
            self.v[k] = np.array(state[f"v/{k}"])


def make_optimizer(name: str, params, lr: float, momentum: float = 0.9, betas=(0.9, 0.999),
                   weight_decay: float = 0.0, lr_scales=None) -> Optimizer:
    if name == "adam":
        return Adam(params, lr, tuple(betas), weight_decay=weight_decay, lr_scales=lr_scales)
    if name == "sgd":
        return SGD(params, lr, momentum, weight_decay, lr_scales)
    raise ValueError(f"unknown optimizer {name!r}; expected 'adam' or 'sgd'")
