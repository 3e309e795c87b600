"""Central finite-difference checks for the autodiff tape."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad


def numerical_grad(f: Callable[[], ad.Tensor], tensors: Sequence[ad.Tensor], h: float = 1e-5) -> list[np.ndarray]:
    """d f / d t for every tensor by central differences; ``f`` rereads ``t.data`` on each call."""
    out = []
    with ad.no_grad():
        for t in tensors:
            g = np.zeros_like(t.data)
            flat, gflat = t.data.reshape(-1), g.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = f().item()
                flat[i] = orig - h
                fm = f().item()
                flat[i] = orig
                gflat[i] = (fp - fm) / (2.0 * h)
            out.append(g)
    return out


def analytic_grad(f: Callable[[], ad.Tensor], tensors: Sequence[ad.Tensor]) -> list[np.ndarray]:
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    ad.backward(f())
    return [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """max |a - b| / max(|a|, |b|, floor); the floor keeps near-zero gradients from dominating."""
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def max_relative_error(f: Callable[[], ad.Tensor], tensors: Sequence[ad.Tensor], h: float = 1e-5,
                       floor: float = 1e-6) -> float:
    ana = analytic_grad(f, tensors)
    num = numerical_grad(f, tensors, h)
    return max(relative_error(a, n, floor) for a, n in zip(ana, num))
