"""Procedural aerial worlds, observation rendering, episodes and the oracle policy."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import language as lang
from .geometry import (Action, DroneState, Trajectory, ViewArea, footprint_side, is_success,
                       rotation, view_area_from_state)
from .losses import GroundingTarget


class GenerationError(RuntimeError):
    pass


class RenderError(RuntimeError):
    pass


@dataclass(frozen=True)
class EnvConfig:
    world_cells: int = 48
    scale_m: float = 10.0
    n_landmarks: tuple = (6, 10)
    altitude: float = 40.0
    fov: float = math.pi / 2
    grid: int = 8
    max_step: float = 40.0
    hops: tuple = (2, 5)          # start distance in multiples of max_step
    max_steps: int = 10
    z_min: float = 10.0
    z_max: float = 100.0
    heading_eps: float = 1e-6
    multi_round_prob: float = 0.5
    vary_altitude: bool = False

    @property
    def n_channels(self) -> int:
        # class one-hots, colour one-hots, in-world flag
        return len(lang.CLASSES) + len(lang.COLORS) + 1

    @property
    def waypoint_radius(self) -> float:
        return 0.5 * self.max_step


@dataclass
class Landmark:
    cls: int      # 1-based index into CLASSES
    color: int    # 1-based index into COLORS
    row: int
    col: int
    height: int
    width: int

    def rect(self, scale: float) -> tuple[float, float, float, float]:
        """World rectangle (x0, y0, x1, y1) in metres."""
        return (self.col * scale, self.row * scale,
                (self.col + self.width) * scale, (self.row + self.height) * scale)

    @property
    def words(self) -> tuple[str, str]:
        return lang.COLORS[self.color - 1], lang.CLASSES[self.cls - 1]


@dataclass
class World:
    cls: np.ndarray    # (H, W) int, 0 = empty; row index grows northward
    color: np.ndarray  # (H, W) int
    scale_m: float
    landmarks: list = field(default_factory=list)

    @property
    def h(self) -> int:
        return self.cls.shape[0]

    @property
    def w(self) -> int:
        return self.cls.shape[1]

    @property
    def extent(self) -> tuple[float, float]:
        return self.w * self.scale_m, self.h * self.scale_m

    def landmark_at(self, x: float, y: float) -> Landmark:
        """Recover the landmark covering a world point from the cell grid."""
        col, row = int(math.floor(x / self.scale_m)), int(math.floor(y / self.scale_m))
        for lm in self.landmarks:
            if lm.row <= row < lm.row + lm.height and lm.col <= col < lm.col + lm.width:
                return lm
        raise GenerationError(f"no landmark at ({x}, {y})")

    @classmethod
    def from_cells(cls, h, w, scale_m, cells) -> "World":
        arr = np.asarray(cells, dtype=int).reshape(h, w, 2)
        world = cls(arr[..., 0].copy(), arr[..., 1].copy(), float(scale_m))
        world.landmarks = _components(world)
        return world


def _components(world: World) -> list:
    """Rebuild landmark rectangles from cells (landmarks never touch)."""
    seen = np.zeros_like(world.cls, dtype=bool)
    out = []
    for r in range(world.h):
        for c in range(world.w):
            if world.cls[r, c] == 0 or seen[r, c]:
                continue
            rows, cols = [r], [c]
            stack = [(r, c)]
            seen[r, c] = True
            while stack:
                i, j = stack.pop()
                for a, b in ((i + 1, j), (i - 1, j), (i, j + 1), (i, j - 1)):
                    if 0 <= a < world.h and 0 <= b < world.w and not seen[a, b] and world.cls[a, b] != 0:
                        seen[a, b] = True
                        stack.append((a, b))
                        rows.append(a)
                        cols.append(b)
            r0, c0 = min(rows), min(cols)
            out.append(Landmark(int(world.cls[r, c]), int(world.color[r, c]), r0, c0,
                                max(rows) - r0 + 1, max(cols) - c0 + 1))
    return out


def generate_world(seed: int, cfg: EnvConfig = EnvConfig(), max_tries: int = 1000) -> World:
    rng = np.random.default_rng([seed, 0x77])
    n = cfg.world_cells
    cls = np.zeros((n, n), dtype=int)
    color = np.zeros((n, n), dtype=int)
    occupied = np.zeros((n, n), dtype=bool)
    count = int(rng.integers(cfg.n_landmarks[0], cfg.n_landmarks[1] + 1))
    landmarks = []
    tries = 0
    while len(landmarks) < count:
        tries += 1
        if tries > max_tries:
            raise GenerationError(f"could not place {count} landmarks (seed {seed})")
        hgt, wid = (int(v) for v in rng.integers(1, 3, size=2))
        row = int(rng.integers(1, n - hgt - 1))
        col = int(rng.integers(1, n - wid - 1))
        # one-cell moat keeps landmarks separable
        if occupied[row - 1:row + hgt + 1, col - 1:col + wid + 1].any():
            continue
        lm = Landmark(int(rng.integers(1, len(lang.CLASSES) + 1)), int(rng.integers(1, len(lang.COLORS) + 1)),
                      row, col, hgt, wid)
        cls[row:row + hgt, col:col + wid] = lm.cls
        color[row:row + hgt, col:col + wid] = lm.color
        occupied[row:row + hgt, col:col + wid] = True
        landmarks.append(lm)
    return World(cls, color, cfg.scale_m, landmarks)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def _sample_points(state: DroneState, cfg: EnvConfig, z=None) -> tuple[np.ndarray, float]:
    side = footprint_side(state.z if z is None else z, cfg.fov)
    g = cfg.grid
    offs = (np.arange(g) + 0.5) / g * side - side / 2
    u = np.tile(offs, g)                  # column -> right
    v = np.repeat(-offs, g)               # row 0 -> top
    local = np.stack([u, v], axis=1)
    world = local @ rotation(state.theta).T + np.array([state.x, state.y])
    return world, side


def target_box(state: DroneState, rect, cfg: EnvConfig) -> GroundingTarget:
    """Project a world rectangle into normalised observation coordinates and clip it."""
    side = footprint_side(state.z, cfg.fov)
    x0, y0, x1, y1 = rect
    pts = np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]]) - np.array([state.x, state.y])
    local = pts @ rotation(state.theta)   # rotate by -theta
    nx_ = (local[:, 0] + side / 2) / side
    ny_ = (side / 2 - local[:, 1]) / side
    lo_x, hi_x = np.clip([nx_.min(), nx_.max()], 0.0, 1.0)
    lo_y, hi_y = np.clip([ny_.min(), ny_.max()], 0.0, 1.0)
    w, h = hi_x - lo_x, hi_y - lo_y
    if w <= 0 or h <= 0:
        return GroundingTarget(0, np.zeros(4))
    return GroundingTarget(1, np.array([lo_x + w / 2, lo_y + h / 2, w, h]))


def attention_mask(target: GroundingTarget, grid: int) -> np.ndarray:
    """Cells of the observation grid that overlap the clipped target box."""
    mask = np.zeros((grid, grid), dtype=np.int8)
    if target.c == 0:
        return mask
    x, y, w, h = target.box
    edges = np.arange(grid + 1) / grid
    cols = (edges[1:] > x - w / 2) & (edges[:-1] < x + w / 2)
    rows = (edges[1:] > y - h / 2) & (edges[:-1] < y + h / 2)
    mask[np.ix_(rows, cols)] = 1
    return mask


def render_observation(world: World, state: DroneState, cfg: EnvConfig = EnvConfig(), target_rect=None):
    """Nearest-cell resampling of the footprint into a (C, G, G) grid.

    Returns (observation, grounding target, attention mask); without a
    target rectangle the label is absent (c = 0).
    """
    pts, _ = _sample_points(state, cfg)
    col = np.floor(pts[:, 0] / world.scale_m).astype(int)
    row = np.floor(pts[:, 1] / world.scale_m).astype(int)
    inside = (col >= 0) & (col < world.w) & (row >= 0) & (row < world.h)
    if not inside.any():
        raise RenderError(f"footprint of {state} lies outside the world")
    n_cls, n_col = len(lang.CLASSES), len(lang.COLORS)
    g = cfg.grid
    obs = np.zeros((cfg.n_channels, g * g))
    idx = np.nonzero(inside)[0]
    cell_cls = world.cls[row[idx], col[idx]]
    cell_color = world.color[row[idx], col[idx]]
    has = cell_cls > 0
    obs[cell_cls[has] - 1, idx[has]] = 1.0
    obs[n_cls + cell_color[has] - 1, idx[has]] = 1.0
    obs[n_cls + n_col, idx] = 1.0
    obs = obs.reshape(cfg.n_channels, g, g)
    if target_rect is None:
        tgt = GroundingTarget(0, np.zeros(4))
    else:
        tgt = target_box(state, target_rect, cfg)
    return obs, tgt, attention_mask(tgt, g)


# ---------------------------------------------------------------------------
# dynamics and oracle
# ---------------------------------------------------------------------------

def apply_action(state: DroneState, action: Action, cfg: EnvConfig = EnvConfig()) -> DroneState:
    z = min(max(state.z + action.dz, cfg.z_min), cfg.z_max)
    theta = state.theta
    if math.hypot(action.dx, action.dy) > cfg.heading_eps:
        theta = math.atan2(action.dy, action.dx)
    return DroneState(state.x + action.dx, state.y + action.dy, z, theta)


def oracle_action(state: DroneState, gt: Trajectory, cfg: EnvConfig = EnvConfig()) -> Action:
    """Capped step toward the next unreached ground-truth waypoint; stop once successful."""
    if is_success(view_area_from_state(state, cfg.fov), gt.target):
        return Action(0.0, 0.0, 0.0, True)
    way = np.array([[s.x, s.y, s.z] for s in gt.states])
    here = np.array([state.x, state.y, state.z])
    d = np.hypot(way[:, 0] - here[0], way[:, 1] - here[1])
    i = int(np.argmin(d))
    if d[i] <= cfg.waypoint_radius:
        i = min(i + 1, len(way) - 1)
    delta = way[i] - here
    return Action(*delta, stop=False).capped(cfg.max_step)


# ---------------------------------------------------------------------------
# episodes
# ---------------------------------------------------------------------------

@dataclass
class Episode:
    seed: int
    world_ref: str
    dialog: list                   # [(role, text)], role in {"que", "ins"}
    states: list                   # ground-truth DroneStates
    trajectory: Trajectory
    grounding: list                # GroundingTarget per step
    attention: list                # (G, G) int8 per step
    target_rect: tuple

    @property
    def target(self) -> ViewArea:
        return self.trajectory.target

    @property
    def rounds(self):
        return lang.split_rounds(self.dialog)

    @property
    def current_dialog(self):
        return self.rounds[-1]

    @property
    def history_dialogs(self):
        return self.rounds[:-1]

    @property
    def instruction(self) -> str:
        return self.current_dialog[-1][1]

    def with_instruction(self, text: str) -> "Episode":
        dialog = list(self.dialog)
        dialog[-1] = ("ins", text)
        return Episode(self.seed, self.world_ref, dialog, self.states, self.trajectory,
                       self.grounding, self.attention, self.target_rect)


def rollout_oracle(start: DroneState, gt: Trajectory, cfg: EnvConfig):
    """Follow the oracle from ``start``; returns the visited states."""
    states = [start]
    for _ in range(cfg.max_steps):
        act = oracle_action(states[-1], gt, cfg)
        if act.stop:
            break
        states.append(apply_action(states[-1], act, cfg))
    return states


def _unique_targets(world: World) -> list:
    combos = {}
    for lm in world.landmarks:
        combos.setdefault((lm.cls, lm.color), []).append(lm)
    return [v[0] for v in combos.values() if len(v) == 1]


def _dialog(rng, cardinal: str, color: str, cls: str, cfg: EnvConfig) -> list:
    current = lang.make_instruction(cardinal, color, cls)
    if rng.random() >= cfg.multi_round_prob:
        return [("ins", current)]
    hist = lang.HISTORY_INSTRUCTIONS[int(rng.integers(len(lang.HISTORY_INSTRUCTIONS)))]
    question = lang.QUESTIONS[int(rng.integers(len(lang.QUESTIONS)))]
    return [("ins", hist.format(cardinal=cardinal, color=color, cls=cls)),
            ("que", question), ("ins", current)]


def episode_from_states(seed, world_ref, dialog, states, world: World, target_rect, cfg: EnvConfig) -> Episode:
    areas = [view_area_from_state(s, cfg.fov) for s in states]
    grounding, attention = [], []
    for s in states:
        _, tgt, mask = render_observation(world, s, cfg, target_rect)
        grounding.append(tgt)
        attention.append(mask)
    return Episode(seed, world_ref, dialog, list(states), Trajectory(areas, list(states)),
                   grounding, attention, tuple(target_rect))


def generate_episode(world: World, seed: int, cfg: EnvConfig = EnvConfig(), world_ref: str = "",
                     max_tries: int = 200) -> Episode:
    rng = np.random.default_rng([seed, 0xE9])
    candidates = _unique_targets(world)
    if not candidates:
        raise GenerationError("world has no uniquely describable landmark")
    width, height = world.extent
    half = footprint_side(cfg.altitude, cfg.fov) / 2
    for _ in range(max_tries):
        lm = candidates[int(rng.integers(len(candidates)))]
        x0, y0, x1, y1 = lm.rect(world.scale_m)
        goal = np.array([(x0 + x1) / 2, (y0 + y1) / 2])
        bearing_idx = int(rng.integers(8))
        bearing = bearing_idx * math.pi / 4
        hops = int(rng.integers(cfg.hops[0], cfg.hops[1] + 1))
        unit = np.array([math.cos(bearing), math.sin(bearing)])
        start = goal - hops * cfg.max_step * unit
        if not (half <= start[0] <= width - half and half <= start[1] <= height - half):
            continue
        z = cfg.altitude
        if cfg.vary_altitude:
            z = float(rng.uniform(0.75, 1.25) * cfg.altitude)
        states = [DroneState(*(goal - (hops - i) * cfg.max_step * unit), z, bearing) for i in range(hops + 1)]
        if len(states) > cfg.max_steps:
            continue
        color, cls = lm.words
        dialog = _dialog(rng, lang.CARDINALS[bearing_idx], color, cls, cfg)
        ep = episode_from_states(seed, world_ref, dialog, states, world, (x0, y0, x1, y1), cfg)
        visited = rollout_oracle(states[0], ep.trajectory, cfg)
        if not is_success(view_area_from_state(visited[-1], cfg.fov), ep.target):
            continue
        return ep
    raise GenerationError(f"no feasible episode for seed {seed}")


def generate_dataset(n_worlds: int, n_episodes: int, seed: int, cfg: EnvConfig = EnvConfig()):
    """Worlds keyed by reference name, and episodes spread round-robin over them."""
    worlds = {f"world_{seed}_{i}": generate_world(seed * 100003 + i, cfg) for i in range(n_worlds)}
    refs = list(worlds)
    episodes = []
    for j in range(n_episodes):
        ref = refs[j % len(refs)]
        episodes.append(generate_episode(worlds[ref], seed * 1000003 + j, cfg, world_ref=ref))
    return worlds, episodes
