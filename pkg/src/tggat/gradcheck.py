"""Central-difference verification of every differentiable component on a tiny
model and a 2-step episode."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import losses as L
from . import numerics as nx
from .config import Config
from .env import generate_episode, generate_world, oracle_action, render_observation
from .language import Vocabulary, tokenize
from .model import MemoryBuffer
from .trainer import build_model, episode_loss

COMPONENTS = ("MHCA", "GAT", "action", "grounding", "attention",
              "L_l1", "L_giou", "L_bce", "L_gr", "L_nav", "L_hap", "L_sum")
THRESHOLD = 1e-4


@dataclass
class ComponentResult:
    name: str
    worst: float
    per_param: dict

    @property
    def passed(self) -> bool:
        return self.worst < THRESHOLD

    @property
    def offenders(self) -> list[str]:
        return sorted(k for k, v in self.per_param.items() if v >= THRESHOLD)


def tiny_config(seed: int = 0) -> Config:
    return Config(d_model=8, n_heads=2, n_text_layers=1, n_gat_layers=2, n_mhca_layers=1, ffn_mult=2,
                  max_text_len=32, grid=4, seed=seed, aug_p=0.0)


def _faulty(x: nx.DiffValue) -> nx.DiffValue:
    """Identity forward, wrong (scaled) backward: the negative control."""
    return nx._node(x.values.copy(), (x,), lambda g: (1.5 * g,), "faulty")


def _projection(rng, shape):
    return rng.normal(size=shape)


class _Fixture:
    def __init__(self, seed: int):
        self.cfg = cfg = tiny_config(seed)
        self.vocab = Vocabulary.default()
        env = cfg.env
        world = generate_world(seed, env)
        ep = generate_episode(world, seed, env, world_ref="w")
        self.world, self.episode = world, ep
        self.states = ep.states[:2]
        self.model = m = build_model(cfg, self.vocab)
        rng = np.random.default_rng([seed, 0x6C])
        # non-zero distance bias so the graph term is exercised
        for layer in m.gat.layers:
            layer.w_e.values[...] = rng.normal(0.0, 0.02, size=layer.w_e.shape)
            layer.b_e.values[...] = rng.normal(0.0, 0.5, size=layer.b_e.shape)
        self.rng = rng
        rendered = [render_observation(world, s, env, ep.target_rect) for s in self.states]
        self.obs = np.stack([r[0] for r in rendered])
        self.targets = [r[1] for r in rendered]
        self.masks = np.stack([r[2] for r in rendered]).astype(float)
        self.oracles = [oracle_action(s, ep.trajectory, env) for s in self.states]

    def encode(self):
        ids = tokenize(self.episode.current_dialog, self.episode.history_dialogs, self.vocab, self.cfg.max_text_len)
        return self.model.encode_dialog(ids)


def _subset(params: dict, prefix: str) -> dict:
    return {k: v for k, v in params.items() if k.startswith(prefix)}


def run_gradcheck(seed: int = 0, eps: float = 1e-5, corrupt: str | None = None,
                  max_entries_full: int = 16) -> list[ComponentResult]:
    """Worst relative error per component; ``corrupt`` names a component whose
    analytic gradient is deliberately broken."""
    fx = _Fixture(seed)
    m, cfg, rng = fx.model, fx.cfg, fx.rng
    params = m.parameters()
    g, d = cfg.grid, cfg.d_model
    results = []

    def wrap(name, f):
        if name != corrupt:
            return f
        return lambda: _faulty(f())

    def check(name, f, ps, max_entries=None):
        errs = nx.gradient_errors(wrap(name, f), ps, eps=eps, max_entries=max_entries, seed=seed)
        results.append(ComponentResult(name, max(errs.values()), errs))

    with nx.no_grad():
        text_c, text_mask = fx.encode()
        grid_c, f_c, d_c = m.observe(text_c, fx.obs, np.array([s.theta for s in fx.states]))
    text_c = nx.constant(text_c.values)

    # MHCA pooling: projection of F~ against the fixed [CLS] and grid features
    r_mhca = _projection(rng, (2, 1, d))
    grid_const = nx.constant(grid_c.values)
    check("MHCA", lambda: nx.sum_(m.mhca(text_c[0:1], grid_const) * r_mhca), _subset(params, "mhca."))

    # GAT: fused current tokens for both steps, memory from constant features
    r_gat = _projection(rng, (2, 2, d))

    def gat():
        buf = MemoryBuffer(cfg.max_steps)
        for t, s in enumerate(fx.states):
            buf.append(nx.constant(f_c.values[t:t + 1]), nx.constant(d_c.values[t:t + 1]), (s.x, s.y))
        a, b = m.gat(text_c, text_mask, buf, steps=np.arange(2))
        return nx.sum_(a * r_gat[0]) + nx.sum_(b * r_gat[1])
    check("GAT", gat, _subset(params, "gat."))

    x_in = nx.constant(rng.normal(size=(2, d)))
    r_act = _projection(rng, (2, 3))
    r_stop = _projection(rng, (2, 1))

    def action():
        disp, stop = m.action_head(x_in)
        return nx.sum_(disp * r_act) + nx.sum_(stop * r_stop)
    check("action", action, _subset(params, "action_head."))

    r_gr = _projection(rng, (2, 5))

    def grounding():
        p = m.grounding_head(x_in)
        return nx.sum_(nx.concat([p.c_hat, p.b_hat], axis=1) * r_gr)
    check("grounding", grounding, _subset(params, "grounding_head."))

    r_att = _projection(rng, (2, g, g))
    check("attention", lambda: nx.sum_(m.attention_head(x_in, grid_const, g) * r_att),
          _subset(params, "attention_head."))

    # losses with respect to their predictions
    def box(lo, hi, size):
        return rng.uniform(lo, hi, size=size)

    b_hat = nx.leaf(np.column_stack([box(0.3, 0.7, 2), box(0.3, 0.7, 2), box(0.2, 0.5, 2), box(0.2, 0.5, 2)]))
    b_gt = np.column_stack([box(0.3, 0.7, 2), box(0.3, 0.7, 2), box(0.2, 0.5, 2), box(0.2, 0.5, 2)])
    c_hat = nx.leaf(rng.uniform(0.1, 0.9, size=(2, 1)))
    check("L_l1", lambda: L.smooth_l1(b_hat, b_gt), {"b_hat": b_hat})
    check("L_giou", lambda: L.giou_loss(b_hat, b_gt), {"b_hat": b_hat})
    check("L_bce", lambda: L.bce(c_hat, [[1.0], [0.0]]), {"c_hat": c_hat})
    gts = [L.GroundingTarget(1, b_gt[0]), L.GroundingTarget(0, b_gt[1])]
    check("L_gr", lambda: L.grounding_loss(L.GroundingPrediction(c_hat, b_hat), gts, cfg.weights),
          {"c_hat": c_hat, "b_hat": b_hat})
    disp = nx.leaf(rng.uniform(-30, 30, size=(2, 3)))
    stop = nx.leaf(rng.uniform(0.1, 0.9, size=(2, 1)))
    check("L_nav", lambda: L.nav_loss(disp, stop, fx.oracles, cfg.max_step), {"disp": disp, "stop": stop})
    att = nx.leaf(rng.uniform(0.05, 0.95, size=(2, g, g)))
    check("L_hap", lambda: L.hap_loss(att, fx.masks), {"att": att})

    # the full objective through every parameter
    check("L_sum", lambda: episode_loss(m, fx.vocab, cfg, fx.episode, fx.world, fx.states).total,
          params, max_entries=max_entries_full)
    return results


def format_report(results: list[ComponentResult]) -> str:
    lines = [f"{'component':<10} {'max_rel_err':>12}  status"]
    for r in results:
        lines.append(f"{r.name:<10} {r.worst:12.3e}  {'PASS' if r.passed else 'FAIL'}")
        if not r.passed:
            lines.append(f"    offending: {', '.join(r.offenders)}")
    return "\n".join(lines)


if __name__ == "__main__":
    t0 = time.time()
    res = run_gradcheck()
    print(format_report(res))
    print(f"{time.time() - t0:.1f}s")
