"""Graph-aware transformer over text and history tokens, plus the action,
grounding and human-attention heads."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .encoders import DirectionEncoder, MHCAStack, ObservationFeaturizer, TextEncoder
from .geometry import pairwise_distance_matrix
from .layers import LayerNorm, Linear, Module, TransformerLayer, uniform_init
from .losses import GroundingPrediction
from .numerics import DiffValue, ShapeError

# buffer locations snap to this lattice (metres) so translations on it are exact
LOCATION_QUANTUM = 1.0 / 256.0


class CapacityError(RuntimeError):
    pass


@dataclass
class MemoryBuffer:
    capacity: int
    images: list = field(default_factory=list)
    directions: list = field(default_factory=list)
    locations: list = field(default_factory=list)

    def __len__(self):
        return len(self.images)

    def append(self, f_tilde: DiffValue, direction: DiffValue, location) -> "MemoryBuffer":
        if len(self) >= self.capacity:
            raise CapacityError(f"memory buffer full ({self.capacity} steps)")
        x, y = (round(float(v) / LOCATION_QUANTUM) * LOCATION_QUANTUM for v in location[:2])
        self.images.append(f_tilde)
        self.directions.append(direction)
        self.locations.append((x, y))
        return self

    def distance_matrix(self) -> np.ndarray:
        return pairwise_distance_matrix(np.asarray(self.locations))

    def shifted(self, dx: float, dy: float) -> "MemoryBuffer":
        out = MemoryBuffer(self.capacity)
        for f, d, (x, y) in zip(self.images, self.directions, self.locations):
            out.append(f, d, (x + dx, y + dy))
        return out


def append_memory(buffer: MemoryBuffer, f_tilde, dir_emb, location) -> MemoryBuffer:
    return buffer.append(f_tilde, dir_emb, location)


def build_bias(E, w_e: DiffValue, b_e: DiffValue) -> DiffValue:
    """Per-head affine map of the distance matrix: G_h = w_e[h] * E + b_e[h]."""
    E = np.asarray(E, dtype=float)
    if E.ndim != 2 or E.shape[0] != E.shape[1]:
        raise ShapeError(f"distance matrix must be square, got {E.shape}")
    heads = w_e.shape[0]
    return nx.reshape(w_e, (heads, 1, 1)) * E[None] + nx.reshape(b_e, (heads, 1, 1))


class GraphAwareLayer(Module):
    def __init__(self, d: int, n_heads: int, ffn_mult: int, rng):
        self.block = TransformerLayer(d, n_heads, ffn_mult, rng)
        # zero start: the layer begins as plain self-attention
        self.w_e = nx.leaf(np.zeros(n_heads))
        self.b_e = nx.leaf(np.zeros(n_heads))

    def full_bias(self, E_hist: np.ndarray, n_text: int) -> DiffValue:
        """Bias over [text | history] tokens; only history-history pairs are non-zero."""
        g = build_bias(E_hist, self.w_e, self.b_e)
        heads, n_hist = g.shape[0], g.shape[1]
        if n_text == 0:
            return g
        g = nx.concat([np.zeros((heads, n_text, n_hist)), g], axis=1)
        return nx.concat([np.zeros((heads, n_text + n_hist, n_text)), g], axis=2)

    def __call__(self, tokens, E_hist, n_text, key_mask=None, use_bias=True, weights_out=None, select=None):
        n = tokens.shape[-2]
        if E_hist.shape[0] != n - n_text:
            raise ShapeError(f"bias covers {E_hist.shape[0]} tokens but {n - n_text} carry locations")
        bias = self.full_bias(E_hist, n_text) if use_bias else None
        select_bias = None
        if select is not None and bias is not None:
            rows = select[-1]
            select_bias = nx.transpose(bias[:, rows, :], (1, 0, 2, 3))
        return self.block(tokens, bias=bias, key_mask=key_mask, weights_out=weights_out,
                          select=select, select_bias=select_bias)


@dataclass
class ForwardOutput:
    action_in: DiffValue      # fused current-direction tokens (T, d)
    grounding_in: DiffValue   # fused current-image tokens (T, d)
    grid: DiffValue           # grid features of those steps (T, G*G, d)


class GraphAwareTransformer(Module):
    def __init__(self, d: int, n_heads: int, ffn_mult: int, n_layers: int, max_steps: int, rng):
        self.step_emb = uniform_init(rng, (max_steps, d), d)
        self.n_layers = n_layers
        for i in range(n_layers):
            setattr(self, f"layer{i}", GraphAwareLayer(d, n_heads, ffn_mult, rng))
        self.norm = LayerNorm(d)

    @property
    def layers(self):
        return [getattr(self, f"layer{i}") for i in range(self.n_layers)]

    def __call__(self, text: DiffValue, text_mask, buffer: MemoryBuffer, steps=None, use_bias: bool = True,
                 weights_out=None):
        """Fused (direction, image) tokens for each step in ``steps`` (default: the last).

        Step t sees the text and memory entries 0..t only; later entries are
        masked out as keys, which is exactly the computation on a buffer
        truncated after step t.
        """
        n = len(buffer)
        if n == 0:
            raise ValueError("forward needs at least one memory entry")
        steps = np.array([n - 1] if steps is None else steps, dtype=int)
        pos = self.step_emb[0:n]
        images = nx.concat(buffer.images, axis=0) + pos
        dirs = nx.concat(buffer.directions, axis=0) + pos
        n_text = text.shape[0]
        tokens = nx.concat([text, images, dirs], axis=0)
        E = buffer.distance_matrix()
        E_hist = np.block([[E, E], [E, E]])
        hist_ok = np.arange(n)[None, :] <= steps[:, None]
        key_mask = np.concatenate([np.broadcast_to(np.asarray(text_mask, bool), (len(steps), n_text)),
                                   hist_ok, hist_ok], axis=1)
        # only the current image and direction tokens feed the heads, so the
        # last layer computes just those two query rows per step
        rows = np.stack([n_text + steps, n_text + n + steps], axis=1)
        batch = np.arange(len(steps))[:, None]
        last = self.n_layers - 1
        for i, layer in enumerate(self.layers):
            select = None
            if i == last:
                select = (rows,) if tokens.ndim == 2 else (batch, rows)
            tokens = layer(tokens, E_hist, n_text, key_mask=key_mask, use_bias=use_bias,
                           weights_out=weights_out, select=select)
        if last < 0:
            tokens = tokens[rows]
        tokens = self.norm(tokens)
        return tokens[:, 1, :], tokens[:, 0, :]


class ActionHead(Module):
    def __init__(self, d: int, max_step: float, rng):
        self.fc1 = Linear(d, d, rng)
        self.fc2 = Linear(d, 4, rng)
        self.max_step = max_step

    def __call__(self, x):
        """(T, d) -> displacement (T, 3) in metres, stop probability (T, 1)."""
        raw = self.fc2(nx.gelu(self.fc1(x)))
        disp = nx.scale(nx.tanh(raw[:, 0:3]), self.max_step)
        return disp, nx.sigmoid(raw[:, 3:4])


class GroundingHead(Module):
    def __init__(self, d: int, rng):
        self.fc1 = Linear(d, d, rng)
        self.fc2 = Linear(d, d, rng)
        self.fc3 = Linear(d, 5, rng)

    def __call__(self, x) -> GroundingPrediction:
        out = nx.sigmoid(self.fc3(nx.gelu(self.fc2(nx.gelu(self.fc1(x))))))
        return GroundingPrediction(c_hat=out[:, 0:1], b_hat=out[:, 1:5])


class AttentionHead(Module):
    def __init__(self, d: int, rng):
        self.proj = Linear(d, d, rng)

    def __call__(self, x, grid: DiffValue, g: int) -> DiffValue:
        """Per-cell sigmoid(<proj(x), cell feature> / sqrt(d)) as (T, G, G)."""
        t, d = x.shape
        q = nx.reshape(self.proj(x), (t, d, 1))
        scores = nx.scale(grid @ q, 1.0 / math.sqrt(d))
        return nx.reshape(nx.sigmoid(scores), (t, g, g))


class TGGAT(Module):
    """Full agent network. ``cfg`` is a :class:`tggat.config.Config`."""

    def __init__(self, cfg, vocab_size: int, n_channels: int, seed: int | None = None):
        rng = np.random.default_rng(cfg.seed if seed is None else seed)
        d = cfg.d_model
        self.cfg = cfg
        self.text = TextEncoder(vocab_size, d, cfg.max_text_len, cfg.n_text_layers, cfg.n_heads, cfg.ffn_mult, rng)
        self.direction = DirectionEncoder(d, rng)
        self.featurizer = ObservationFeaturizer(n_channels, d, rng)
        self.mhca = MHCAStack(d, cfg.n_heads, cfg.ffn_mult, cfg.n_mhca_layers, rng)
        self.gat = GraphAwareTransformer(d, cfg.n_heads, cfg.ffn_mult, cfg.n_gat_layers, cfg.max_steps, rng)
        self.action_head = ActionHead(d, cfg.max_step, rng)
        self.grounding_head = GroundingHead(d, rng)
        self.attention_head = AttentionHead(d, rng)

    # -- per-episode / per-step pieces --------------------------------------
    def encode_dialog(self, ids):
        """Encode tokens with trailing padding trimmed (pads are masked anyway)."""
        ids = np.asarray(ids, dtype=int)
        keep = np.nonzero(ids != self.text.pad_id)[0]
        ids = ids[:int(keep[-1]) + 1 if len(keep) else 1]
        return self.text(ids), ids != self.text.pad_id

    def observe(self, text: DiffValue, obs, theta):
        """Grid features (T, G*G, d), pooled features (T, d), direction embeddings (T, d)."""
        obs = np.asarray(obs, dtype=float)
        if obs.ndim == 3:
            obs = obs[None]
        grid = self.featurizer(obs)
        pooled = self.mhca(text[0:1], grid)
        f_tilde = nx.reshape(pooled, (obs.shape[0], pooled.shape[-1]))
        return grid, f_tilde, self.direction(theta)

    def forward(self, text, text_mask, buffer: MemoryBuffer, grid, steps=None, use_bias: bool = True) -> ForwardOutput:
        action_in, grounding_in = self.gat(text, text_mask, buffer, steps=steps, use_bias=use_bias)
        return ForwardOutput(action_in, grounding_in, grid)

    def heads(self, out: ForwardOutput):
        disp, stop = self.action_head(out.action_in)
        grounding = self.grounding_head(out.grounding_in)
        attn = self.attention_head(out.grounding_in, out.grid, self.cfg.grid)
        return disp, stop, grounding, attn


def predict_action(model: TGGAT, dir_token):
    return model.action_head(dir_token)


def predict_grounding(model: TGGAT, img_token) -> GroundingPrediction:
    return model.grounding_head(img_token)


def predict_human_attention(model: TGGAT, img_token, grid) -> DiffValue:
    return model.attention_head(img_token, grid, model.cfg.grid)
