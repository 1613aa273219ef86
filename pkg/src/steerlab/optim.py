"""Adaptive-moment optimizer and global gradient clipping."""

from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor


class OptimError(RuntimeError):
    """Optimizer contract violation (e.g. stepping without gradients)."""


class Adam:
    """Bias-corrected adaptive-moment gradient descent.

    Holds one first- and second-moment buffer per parameter plus a shared
    step counter.  ``step`` consumes and zeroes the gradients.
    """

    def __init__(self, params, lr: float = 5e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params: list[Tensor] = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        # Parameters are rebound as views into one flat buffer so the whole
        # update runs as a handful of vectorized array operations.
        self.flat = np.concatenate([p.data.reshape(-1) for p in self.params]) \
            if self.params else np.zeros(0)
        offset = 0
        for p in self.params:
            size = p.data.size
            p.data = self.flat[offset : offset + size].reshape(p.data.shape)
            offset += size
        self.m = np.zeros_like(self.flat)
        self.v = np.zeros_like(self.flat)

    def _flat_grad(self) -> np.ndarray:
        chunks = []
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise OptimError(f"parameter {i} has no gradient; run backward first")
            chunks.append(p.grad.reshape(-1))
        return np.concatenate(chunks) if chunks else np.zeros(0)

    def step(self) -> None:
        g = self._flat_grad()
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        self.m *= b1
        gs = g * (1.0 - b1)
        self.m += gs
        self.v *= b2
        np.multiply(g, g, out=gs)
        gs *= 1.0 - b2
        self.v += gs
        denom = self.v / (1.0 - b2**self.t)
        np.sqrt(denom, out=denom)
        denom += self.eps
        np.divide(self.m, denom, out=gs)
        gs *= self.lr / (1.0 - b1**self.t)
        self.flat -= gs
        for p in self.params:
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def clip_grad_global_norm(params, max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``.

    Returns the pre-clip norm.
    """
    total = 0.0
    grads = []
    for p in params:
        if p.grad is None:
            continue
        grads.append(p)
        total += float((p.grad * p.grad).sum())
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for p in grads:
            p.grad = p.grad * scale
    return norm
