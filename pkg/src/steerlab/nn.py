"""Neural layers on top of the tensor engine.

Layers are small parameter containers; ``Module`` walks attributes to collect
named parameters in a deterministic (insertion) order, which fixes both the
optimizer update order and the checkpoint layout.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ConfigError(ValueError):
    """Invalid layer or model configuration."""


def uniform_init(rng: np.random.Generator, shape, scale: float) -> Tensor:
    return T.parameter(rng.uniform(-scale, scale, size=shape))


class Module:
    """Base container: collects parameters from attributes recursively."""

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            key = f"{prefix}.{name}" if prefix else name
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield key, value
            elif isinstance(value, Module):
                yield from value.named_parameters(key)
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{key}{i}")
            elif isinstance(value, dict):
                for k, item in value.items():
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{key}.{k}")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_params(self) -> int:
        return sum(p.size for p in self.parameters())


class Linear(Module):
    def __init__(self, rng, fan_in: int, fan_out: int):
        scale = 1.0 / math.sqrt(fan_in)
        self.w = uniform_init(rng, (fan_in, fan_out), scale)
        self.b = uniform_init(rng, (fan_out,), scale)

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim == 2:
            return T.matmul(x, self.w) + self.b
        lead = x.shape[:-1]
        flat = T.reshape(x, (-1, x.shape[-1]))
        out = T.matmul(flat, self.w) + self.b
        return T.reshape(out, lead + (self.w.shape[1],))


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = T.parameter(np.ones(dim))
        self.bias = T.parameter(np.zeros(dim))
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, eps=self._eps)


class Mlp(Module):
    """Two-layer perceptron with tanh-form GELU, expansion factor 4."""

    def __init__(self, rng, dim: int, expansion: int = 4):
        hidden = expansion * dim
        self.fc1 = Linear(rng, dim, hidden)
        self.fc2 = Linear(rng, hidden, dim)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class Embedding(Module):
    def __init__(self, rng, num: int, dim: int):
        self.table = uniform_init(rng, (num, dim), 1.0 / math.sqrt(dim))

    def __call__(self, ids) -> Tensor:
        return T.embedding(self.table, ids)


class MultiHeadSelfAttention(Module):
    """Scaled dot-product self-attention over the second-to-last axis.

    Accepts (tokens, dim) or (batch, tokens, dim) input.  With ``causal``
    set, token j attends only to tokens 0..j.
    """

    def __init__(self, rng, dim: int, heads: int):
        if dim % heads != 0:
            raise ConfigError(f"embed dim {dim} not divisible by {heads} heads")
        self.wq = Linear(rng, dim, dim)
        self.wk = Linear(rng, dim, dim)
        self.wv = Linear(rng, dim, dim)
        self.wo = Linear(rng, dim, dim)
        self._heads = heads
        self._head_dim = dim // heads

    def __call__(self, x: Tensor, causal: bool = False, return_weights: bool = False):
        squeeze = x.ndim == 2
        if squeeze:
            x = T.reshape(x, (1,) + x.shape)
        b, n, d = x.shape
        h, hd = self._heads, self._head_dim

        def split(t):  # (b, n, d) -> (b, h, n, hd)
            return T.transpose(T.reshape(t, (b, n, h, hd)), (0, 2, 1, 3))

        q = split(self.wq(x))
        k = split(self.wk(x))
        v = split(self.wv(x))
        scores = T.matmul(q, T.transpose_last2(k)) * (1.0 / math.sqrt(hd))
        mask = None
        if causal:
            mask = np.tril(np.ones((n, n), dtype=bool))
        attn = T.softmax(scores, mask=mask)
        mixed = T.matmul(attn, v)  # (b, h, n, hd)
        merged = T.reshape(T.transpose(mixed, (0, 2, 1, 3)), (b, n, d))
        out = self.wo(merged)
        if squeeze:
            out = T.reshape(out, (n, d))
        if return_weights:
            return out, attn.numpy()
        return out


class TransformerBlock(Module):
    """Pre-norm residual block: attention then MLP."""

    def __init__(self, rng, dim: int, heads: int, causal: bool):
        self.ln1 = LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(rng, dim, heads)
        self.ln2 = LayerNorm(dim)
        self.mlp = Mlp(rng, dim)
        self._causal = causal

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.ln1(x), causal=self._causal)
        return x + self.mlp(self.ln2(x))


class GruCell(Module):
    """Gated recurrent cell scanned left-to-right over a token sequence."""

    def __init__(self, rng, dim: int):
        scale = 1.0 / math.sqrt(dim)
        self.wx = uniform_init(rng, (dim, 3 * dim), scale)
        self.wh = uniform_init(rng, (dim, 3 * dim), scale)
        self.b = uniform_init(rng, (3 * dim,), scale)
        self._dim = dim

    def step(self, x: Tensor, h: Tensor) -> Tensor:
        d = self._dim
        xg = T.matmul(x, self.wx) + self.b  # (b, 3d)
        zr = T.sigmoid(xg[:, : 2 * d] + T.matmul(h, self.wh[:, : 2 * d]))
        z = zr[:, :d]
        r = zr[:, d:]
        # Candidate mixes the reset-gated hidden state.
        c = T.tanh(xg[:, 2 * d :] + T.matmul(r * h, self.wh[:, 2 * d :]))
        return (1.0 - z) * h + z * c

    def scan(self, tokens: Tensor) -> Tensor:
        """(batch, n, dim) -> per-token hidden states (batch, n, dim)."""
        b, n, d = tokens.shape
        h = T.tensor(np.zeros((b, d)))
        outs = []
        for j in range(n):
            h = self.step(tokens[:, j, :], h)
            outs.append(T.reshape(h, (b, 1, d)))
        return T.concat(outs, axis=1)
