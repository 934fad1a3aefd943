"""Unimodal encoders: dialog text, heading direction, observation grid, and
the [CLS]-queried cross-attention pooling of grid features."""
from __future__ import annotations

import math

import numpy as np

from . import numerics as nx
from .layers import FeedForward, Linear, Module, MultiHeadAttention, TransformerLayer, uniform_init
from .numerics import DiffValue, ShapeError


class TextEncoder(Module):
    """Token + absolute position embeddings followed by masked self-attention layers."""

    def __init__(self, vocab_size: int, d: int, max_len: int, n_layers: int, n_heads: int, ffn_mult: int, rng,
                 pad_id: int = 0):
        self.tok_emb = uniform_init(rng, (vocab_size, d), d)
        self.pos_emb = uniform_init(rng, (max_len, d), d)
        self.n_layers = n_layers
        self.pad_id = pad_id
        for i in range(n_layers):
            setattr(self, f"layer{i}", TransformerLayer(d, n_heads, ffn_mult, rng))

    @property
    def layers(self):
        return [getattr(self, f"layer{i}") for i in range(self.n_layers)]

    def __call__(self, ids) -> DiffValue:
        ids = np.asarray(ids, dtype=int)
        if len(ids) > self.pos_emb.shape[0]:
            raise ShapeError("token sequence longer than the position table")
        x = self.tok_emb[ids] + self.pos_emb[np.arange(len(ids))]
        key_mask = ids != self.pad_id
        for layer in self.layers:
            x = layer(x, key_mask=key_mask)
        return x


class DirectionEncoder(Module):
    """Three affine layers over (sin theta, cos theta)."""

    def __init__(self, d: int, rng):
        self.fc1 = Linear(2, d, rng)
        self.fc2 = Linear(d, d, rng)
        self.fc3 = Linear(d, d, rng)

    def __call__(self, theta) -> DiffValue:
        """One row per heading: ``theta`` scalar -> (1, d); array (T,) -> (T, d)."""
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        x = nx.constant(np.stack([np.sin(theta), np.cos(theta)], axis=1))
        return self.fc3(nx.gelu(self.fc2(nx.gelu(self.fc1(x)))))


class ObservationFeaturizer(Module):
    """Shared per-cell projection of a (C, G, G) grid to (G*G, d), rows in
    row-major cell order. A leading batch axis is carried through."""

    def __init__(self, n_channels: int, d: int, rng):
        self.proj = Linear(n_channels, d, rng)

    def __call__(self, obs) -> DiffValue:
        obs = np.asarray(obs, dtype=float)
        c, g1, g2 = obs.shape[-3:]
        cells = obs.reshape(obs.shape[:-3] + (c, g1 * g2))
        return self.proj(nx.constant(np.swapaxes(cells, -1, -2)))


class MHCAPool(Module):
    """F~ = y + FFN(y) with y = i_cls + MHCA(F): the [CLS] embedding queries the grid."""

    def __init__(self, d: int, n_heads: int, ffn_mult: int, rng):
        self.attn = MultiHeadAttention(d, n_heads, rng)
        self.ffn = FeedForward(d, ffn_mult * d, rng)

    def __call__(self, i_cls: DiffValue, grid: DiffValue, weights_out: list | None = None) -> DiffValue:
        if i_cls.shape[-2:] != (1, grid.shape[-1]):
            raise ShapeError(f"query {i_cls.shape} does not match grid features {grid.shape}")
        y = i_cls + self.attn(i_cls, grid, weights_out=weights_out)
        return y + self.ffn(y)


class MHCAStack(Module):
    def __init__(self, d: int, n_heads: int, ffn_mult: int, n_layers: int, rng):
        self.n_layers = n_layers
        for i in range(n_layers):
            setattr(self, f"block{i}", MHCAPool(d, n_heads, ffn_mult, rng))

    def __call__(self, i_cls, grid, weights_out=None):
        q = i_cls
        for i in range(self.n_layers):
            q = getattr(self, f"block{i}")(q, grid, weights_out=weights_out)
        return q


def mhca_pool(block: MHCAPool, i_cls: DiffValue, f_t: DiffValue) -> DiffValue:
    """Pool one grid (G*G, d) into a (1, d) feature."""
    return block(i_cls, f_t)
