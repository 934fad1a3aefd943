"""Parameter containers and standard transformer sublayers built on :mod:`numerics`."""
from __future__ import annotations

import math

import numpy as np

from . import numerics as nx
from .numerics import DiffValue, ShapeError


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> DiffValue:
    bound = 1.0 / math.sqrt(fan_in)
    return nx.leaf(rng.uniform(-bound, bound, size=shape))


class Module:
    """Walks attributes to find parameters; names are dotted attribute paths."""

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            if isinstance(value, DiffValue) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> dict:
        return dict(self.named_parameters())

    def zero_grad(self):
        for p in self.parameters().values():
            p.zero_grad()


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = uniform_init(rng, (d_in, d_out), d_in)
        self.bias = uniform_init(rng, (d_out,), d_in) if bias else None

    def __call__(self, x: DiffValue) -> DiffValue:
        y = x @ self.weight
        return y if self.bias is None else y + self.bias


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gain = nx.leaf(np.ones(d))
        self.bias = nx.leaf(np.zeros(d))
        self.eps = eps

    def __call__(self, x: DiffValue) -> DiffValue:
        return nx.layer_norm(x, self.gain, self.bias, self.eps)


class FeedForward(Module):
    def __init__(self, d: int, hidden: int, rng):
        self.fc1 = Linear(d, hidden, rng)
        self.fc2 = Linear(hidden, d, rng)

    def __call__(self, x):
        return self.fc2(nx.gelu(self.fc1(x)))


class MultiHeadAttention(Module):
    def __init__(self, d: int, n_heads: int, rng):
        if d % n_heads:
            raise ShapeError("head count must divide the model width")
        self.n_heads = n_heads
        self.head_dim = d // n_heads
        self.wq = Linear(d, d, rng)
        # a key bias only shifts each query's scores by a constant, which
        # softmax ignores, so it is left out
        self.wk = Linear(d, d, rng, bias=False)
        self.wv = Linear(d, d, rng)
        self.wo = Linear(d, d, rng)

    def _split(self, x: DiffValue) -> DiffValue:
        """(..., n, d) -> (..., H, n, d_head)."""
        lead = x.shape[:-2]
        n = x.shape[-2]
        x = nx.reshape(x, lead + (n, self.n_heads, self.head_dim))
        k = len(lead)
        return nx.transpose(x, tuple(range(k)) + (k + 1, k, k + 2))

    def _merge(self, x: DiffValue) -> DiffValue:
        lead = x.shape[:-3]
        k = len(lead)
        n = x.shape[-2]
        x = nx.transpose(x, tuple(range(k)) + (k + 1, k, k + 2))
        return nx.reshape(x, lead + (n, self.n_heads * self.head_dim))

    def __call__(self, query: DiffValue, context: DiffValue, bias: DiffValue | None = None,
                 key_mask: np.ndarray | None = None, weights_out: list | None = None) -> DiffValue:
        """Scaled dot-product attention over the last two axes.

        ``bias`` broadcasts against the (..., H, n, m) scores and is added
        before the key mask; masked keys (False in ``key_mask``, shape (m,) or
        (batch, m)) receive exactly zero weight.
        """
        q = self._split(self.wq(query))
        k = self._split(self.wk(context))
        v = self._split(self.wv(context))
        scores = nx.scale(q @ nx.transpose(k), 1.0 / math.sqrt(self.head_dim))
        if bias is not None:
            if bias.shape[-1] != scores.shape[-1] or bias.shape[-2] != scores.shape[-2]:
                raise ShapeError(f"bias {bias.shape} does not match scores {scores.shape}")
            scores = scores + bias
        if key_mask is not None:
            key_mask = np.asarray(key_mask, bool)
            fill = np.where(key_mask, 0.0, nx.MASK_FILL)
            fill = fill.reshape(fill.shape[:-1] + (1, 1, fill.shape[-1]))
            scores = scores + fill
        attn = nx.softmax(scores, axis=-1)
        if weights_out is not None:
            weights_out.append(attn.values)
        return self.wo(self._merge(attn @ v))


class TransformerLayer(Module):
    """Pre-norm self-attention layer with an optional additive score bias."""

    def __init__(self, d: int, n_heads: int, ffn_mult: int, rng):
        self.ln1 = LayerNorm(d)
        self.attn = MultiHeadAttention(d, n_heads, rng)
        self.ln2 = LayerNorm(d)
        self.ffn = FeedForward(d, ffn_mult * d, rng)

    def __call__(self, x, bias=None, key_mask=None, weights_out=None, select=None, select_bias=None):
        """``select`` indexes the query positions to compute (default: all);
        ``select_bias`` is then the matching slice of the score bias."""
        h = self.ln1(x)
        q = h
        if select is not None:
            x, q = x[select], h[select]
            bias = select_bias
        x = x + self.attn(q, h, bias=bias, key_mask=key_mask, weights_out=weights_out)
        return x + self.ffn(self.ln2(x))
