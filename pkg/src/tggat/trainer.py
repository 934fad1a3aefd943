"""Imitation learning with alternating teacher and student forcing, AdamW,
held-out evaluation and rollout policies."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import losses as L
from . import numerics as nx
from .augment import augment_observation
from .checkpoint import Checkpoint, restore_params, snapshot
from .config import Config
from .env import Episode, World, apply_action, oracle_action, render_observation
from .geometry import Action, DroneState, MetricReport, Trajectory, compute_metrics, view_area_from_state
from .language import Vocabulary, tokenize
from .model import TGGAT, MemoryBuffer

__all__ = ["AdamW", "EpisodeLoss", "Rollout", "TrainResult", "NonFiniteLossError", "apply_action",
           "episode_loss", "teacher_force_episode", "student_force_episode", "run_policy", "train",
           "evaluate", "build_model", "ModelPolicy", "OraclePolicy", "RandomPolicy", "NeverStopPolicy"]

log = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    def __init__(self, message: str, dump: dict):
        super().__init__(message)
        self.dump = dump


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------

class AdamW:
    """Adam with decoupled weight decay and global-norm gradient clipping."""

    def __init__(self, params: dict, lr: float, weight_decay: float = 0.01, betas=(0.9, 0.999),
                 eps: float = 1e-8, clip: float | None = 1.0):
        self.params = params
        self.lr, self.wd, self.eps, self.clip = lr, weight_decay, eps, clip
        self.b1, self.b2 = betas
        self.m = {k: np.zeros_like(p.values) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.values) for k, p in params.items()}
        self.t = 0

    def grad_norm(self) -> float:
        return math.sqrt(math.fsum(float(np.sum(p.grad * p.grad)) for p in self.params.values()))

    def step(self) -> bool:
        """Apply one update from the accumulated grads.

        An all-zero gradient leaves parameters and moments untouched (no
        decay either); returns whether an update happened.
        """
        norm = self.grad_norm()
        if norm == 0.0:
            return False
        scale = 1.0
        if self.clip is not None and norm > self.clip:
            scale = self.clip / norm
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            g = p.grad * scale
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps) + self.wd * p.values
            p.values -= self.lr * update
        return True

    def state_dict(self):
        moments = {f"m.{k}": v.copy() for k, v in self.m.items()}
        moments.update({f"v.{k}": v.copy() for k, v in self.v.items()})
        return moments, self.t

    def load_state(self, moments: dict, step: int):
        if moments:
            for k in self.params:
                self.m[k][...] = moments[f"m.{k}"]
                self.v[k][...] = moments[f"v.{k}"]
        self.t = step


# ---------------------------------------------------------------------------
# losses over one episode
# ---------------------------------------------------------------------------

@dataclass
class EpisodeLoss:
    total: nx.DiffValue
    nav: float
    hap: float
    gr: float
    n_steps: int
    truncated: bool = False


def _observations(world: World, states, episode: Episode, cfg: Config, aug_seed):
    env = cfg.env
    rendered = [render_observation(world, s, env, episode.target_rect) for s in states]
    obs = np.stack([r[0] for r in rendered])
    if aug_seed is not None and cfg.aug_p > 0:
        aug = cfg.aug
        obs = np.stack([augment_observation(o, aug, list(aug_seed) + [t]) for t, o in enumerate(obs)])
    return obs, [r[1] for r in rendered], np.stack([r[2] for r in rendered]).astype(float)


def _dialog_ids(episode: Episode, vocab: Vocabulary, cfg: Config):
    return tokenize(episode.current_dialog, episode.history_dialogs, vocab, cfg.max_text_len)


def episode_loss(model: TGGAT, vocab: Vocabulary, cfg: Config, episode: Episode, world: World, states,
                 aug_seed=None, use_bias: bool = True) -> EpisodeLoss:
    """Weighted multi-task loss, averaged over the steps at ``states``.

    Step t is supervised by the oracle recomputed at ``states[t]`` and sees
    memory built from ``states[:t + 1]`` only.
    """
    states = list(states)
    truncated = len(states) > cfg.max_steps
    if truncated:
        log.warning("episode %s has %d steps; truncating to %d", episode.seed, len(states), cfg.max_steps)
        states = states[:cfg.max_steps]
    env = cfg.env
    obs, targets, masks = _observations(world, states, episode, cfg, aug_seed)
    text, text_mask = model.encode_dialog(_dialog_ids(episode, vocab, cfg))
    thetas = np.array([s.theta for s in states])
    grid, f_tilde, dirs = model.observe(text, obs, thetas)
    buffer = MemoryBuffer(cfg.max_steps)
    for t, s in enumerate(states):
        buffer.append(f_tilde[t:t + 1], dirs[t:t + 1], (s.x, s.y))
    out = model.forward(text, text_mask, buffer, grid, steps=np.arange(len(states)), use_bias=use_bias)
    disp, stop, grounding, attn = model.heads(out)
    oracles = [oracle_action(s, episode.trajectory, env) for s in states]
    w = cfg.weights
    nav = L.nav_loss(disp, stop, oracles, env.max_step)
    hap = L.hap_loss(attn, masks)
    gr = L.grounding_loss(grounding, targets, w)
    total = L.total_loss(nav, hap, gr, w)
    return EpisodeLoss(total, nav.item(), hap.item(), gr.item(), len(states), truncated)


def teacher_force_episode(model, vocab, cfg: Config, episode: Episode, world: World, aug_seed=None) -> EpisodeLoss:
    """Loss along the ground-truth states."""
    return episode_loss(model, vocab, cfg, episode, world, episode.states, aug_seed)


def student_force_episode(model, vocab, cfg: Config, episode: Episode, world: World, aug_seed=None):
    """Roll out the model's own actions, then supervise every visited state
    with the oracle recomputed there. Returns (loss, rollout)."""
    rollout = run_policy(ModelPolicy(model, vocab, cfg, aug_seed=aug_seed), episode, world, cfg)
    states = rollout.trajectory.states
    if rollout.left_world:
        states = states[:-1]
    return episode_loss(model, vocab, cfg, episode, world, states, aug_seed), rollout


# ---------------------------------------------------------------------------
# policies and rollouts
# ---------------------------------------------------------------------------

@dataclass
class Rollout:
    trajectory: Trajectory
    left_world: bool = False


def _inside(world: World, state: DroneState) -> bool:
    width, height = world.extent
    return 0.0 <= state.x <= width and 0.0 <= state.y <= height


def run_policy(policy, episode: Episode, world: World, cfg: Config) -> Rollout:
    """Execute ``policy`` from the episode start for at most ``max_steps`` states.

    Displacements are capped to ``max_step``; the last permitted state is a
    forced stop. Leaving the world ends the rollout as a failure.
    """
    env = cfg.env
    policy.begin(episode, world)
    states = [episode.states[0]]
    left = False
    for t in range(cfg.max_steps):
        action = policy.act(states[-1], t)
        if action.stop or t == cfg.max_steps - 1:
            break
        nxt = apply_action(states[-1], action.capped(env.max_step), env)
        states.append(nxt)
        if not _inside(world, nxt):
            left = True
            break
    areas = [view_area_from_state(s, env.fov) for s in states]
    return Rollout(Trajectory(areas, states), left)


class ModelPolicy:
    """Greedy policy of a :class:`TGGAT`; stops when the stop probability exceeds 0.5."""

    def __init__(self, model: TGGAT, vocab: Vocabulary, cfg: Config, aug_seed=None, use_bias: bool = True):
        self.model, self.vocab, self.cfg = model, vocab, cfg
        self.aug_seed = aug_seed
        self.use_bias = use_bias

    def begin(self, episode: Episode, world: World):
        self.episode, self.world = episode, world
        with nx.no_grad():
            self.text, self.text_mask = self.model.encode_dialog(_dialog_ids(episode, self.vocab, self.cfg))
        self.buffer = MemoryBuffer(self.cfg.max_steps)

    def act(self, state: DroneState, t: int) -> Action:
        cfg = self.cfg
        obs = render_observation(self.world, state, cfg.env, self.episode.target_rect)[0]
        if self.aug_seed is not None and cfg.aug_p > 0:
            obs = augment_observation(obs, cfg.aug, list(self.aug_seed) + [t])
        with nx.no_grad():
            grid, f_tilde, d = self.model.observe(self.text, obs, state.theta)
            self.buffer.append(f_tilde, d, (state.x, state.y))
            out = self.model.forward(self.text, self.text_mask, self.buffer, grid, use_bias=self.use_bias)
            disp, stop, _, _ = self.model.heads(out)
        dx, dy, dz = disp.values[0]
        return Action(float(dx), float(dy), float(dz), bool(stop.values[0, 0] > 0.5))


class OraclePolicy:
    def begin(self, episode: Episode, world: World):
        self.episode = episode

    def act(self, state, t) -> Action:
        return oracle_action(state, self.episode.trajectory)


class RandomPolicy:
    """Uniform planar heading, uniform step length up to ``max_step``, stop with ``stop_prob``.

    Seeded per episode so results do not depend on evaluation order.
    """

    def __init__(self, cfg: Config, seed: int = 0, stop_prob: float = 0.2):
        self.cfg, self.seed, self.stop_prob = cfg, seed, stop_prob

    def begin(self, episode: Episode, world: World):
        self.rng = np.random.default_rng([self.seed, episode.seed, 0x5A])

    def act(self, state, t) -> Action:
        heading = self.rng.uniform(0.0, 2.0 * math.pi)
        r = self.rng.uniform(0.0, self.cfg.max_step)
        stop = bool(self.rng.random() < self.stop_prob)
        return Action(r * math.cos(heading), r * math.sin(heading), 0.0, stop)


class NeverStopPolicy:
    """Wraps another policy and ignores its stop decisions."""

    def __init__(self, inner):
        self.inner = inner

    def begin(self, episode, world):
        self.inner.begin(episode, world)

    def act(self, state, t) -> Action:
        a = self.inner.act(state, t)
        return Action(a.dx, a.dy, a.dz, False)


def evaluate(policy, episodes, worlds: dict, cfg: Config) -> MetricReport:
    """Roll out ``policy`` (a policy object or a :class:`TGGAT`) on unaugmented observations."""
    if len(episodes) == 0:
        raise ValueError("evaluation needs at least one episode")
    if isinstance(policy, TGGAT):
        raise TypeError("wrap the model in ModelPolicy(model, vocab, cfg)")
    pairs, failed = [], []
    for ep in episodes:
        r = run_policy(policy, ep, worlds[ep.world_ref], cfg)
        pairs.append((r.trajectory, ep.trajectory))
        failed.append(r.left_world)
    return compute_metrics(pairs, failed)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def build_model(cfg: Config, vocab: Vocabulary) -> TGGAT:
    return TGGAT(cfg, len(vocab), cfg.env.n_channels, seed=cfg.seed)


def make_optimizer(model: TGGAT, cfg: Config) -> AdamW:
    return AdamW(model.parameters(), cfg.learning_rate, cfg.weight_decay, (cfg.beta1, cfg.beta2),
                 cfg.adam_eps, cfg.grad_clip)


def iteration_mode(cfg: Config, iteration: int) -> str:
    if cfg.teacher_only:
        return "teacher"
    return "teacher" if (iteration // cfg.alternation_period) % 2 == 0 else "student"


@dataclass
class TrainResult:
    model: TGGAT
    last: Checkpoint
    best: Checkpoint | None
    losses: list = field(default_factory=list)     # mean L_sum per iteration
    history: list = field(default_factory=list)    # evaluation records


def train_step(model, optimizer: AdamW, vocab, cfg: Config, episodes, worlds, iteration: int, augment: bool = True):
    """One iteration: a batch of episodes, mean loss, backward, optimiser step."""
    rng = np.random.default_rng([cfg.seed, iteration, 0xB7])
    idx = rng.choice(len(episodes), size=cfg.batch_size, replace=len(episodes) < cfg.batch_size)
    mode = iteration_mode(cfg, iteration)
    model.zero_grad()
    parts = []
    for k, i in enumerate(idx):
        ep = episodes[int(i)]
        world = worlds[ep.world_ref]
        aug_seed = [cfg.seed, iteration, k] if augment else None
        if mode == "teacher":
            el = teacher_force_episode(model, vocab, cfg, ep, world, aug_seed)
        else:
            el, _ = student_force_episode(model, vocab, cfg, ep, world, aug_seed)
        parts.append(el)
    loss = nx.scale(sum((p.total for p in parts[1:]), parts[0].total), 1.0 / len(parts))
    value = loss.item()
    if not math.isfinite(value):
        dump = {"iteration": iteration, "mode": mode, "loss": repr(value),
                "episodes": [int(episodes[int(i)].seed) for i in idx],
                "parts": [{"nav": p.nav, "hap": p.hap, "gr": p.gr} for p in parts],
                "nonfinite_params": [n for n, p in model.named_parameters() if not np.all(np.isfinite(p.values))]}
        raise NonFiniteLossError(f"non-finite loss {value} at iteration {iteration}", dump)
    loss.backward()
    optimizer.step()
    return value, mode


def train(cfg: Config, worlds: dict, episodes, vocab: Vocabulary | None = None, val_episodes=None,
          resume: Checkpoint | None = None, iterations: int | None = None, augment: bool = True,
          on_eval=None) -> TrainResult:
    """Train from scratch (or from ``resume``) for ``iterations`` steps (default ``max_iterations``).

    Every ``eval_interval`` iterations the model is evaluated on
    ``val_episodes`` and the snapshot with the best SPL is kept.
    """
    if not episodes:
        raise ValueError("training needs at least one episode")
    vocab = vocab or Vocabulary.default()
    model = build_model(cfg, vocab)
    optimizer = make_optimizer(model, cfg)
    start, history = 0, []
    if resume is not None:
        restore_params(model, resume)
        optimizer.load_state(resume.moments, resume.step)
        start, history = resume.iteration, list(resume.history)
    n = cfg.max_iterations if iterations is None else iterations
    losses, best, best_spl = [], None, -math.inf
    for r in history:
        if r.get("spl", -math.inf) > best_spl:
            best_spl = r["spl"]
    for it in range(start, start + n):
        value, _ = train_step(model, optimizer, vocab, cfg, episodes, worlds, it, augment)
        losses.append(value)
        done = it + 1
        if val_episodes and (done % cfg.eval_interval == 0 or done == start + n):
            report = evaluate(ModelPolicy(model, vocab, cfg), val_episodes[:cfg.eval_episodes], worlds, cfg)
            record = {"iteration": done, **report.as_dict()}
            history.append(record)
            if on_eval is not None:
                on_eval(record)
            if report.spl > best_spl:
                best_spl = report.spl
                best = snapshot(model, cfg, done, optimizer, history)
    last = snapshot(model, cfg, start + n, optimizer, history)
    return TrainResult(model, last, best, losses, history)
