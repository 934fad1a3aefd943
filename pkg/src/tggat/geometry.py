"""View-area geometry and navigation metrics (SR / SPL / GP)."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

TWO_PI = 2.0 * math.pi
SUCCESS_IOU = 0.4


class GeometryError(ValueError):
    """Raised for degenerate or otherwise invalid geometric input."""


def wrap_angle(theta: float) -> float:
    wrapped = math.fmod(theta, TWO_PI)
    if wrapped < 0:
        wrapped += TWO_PI
    # fmod of a value just below 0 can round up to exactly 2*pi
    return 0.0 if wrapped >= TWO_PI else wrapped


@dataclass(frozen=True)
class Position:
    x: float
    y: float
    z: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x, self.y, self.z)):
            raise GeometryError(f"non-finite position {self}")
        if self.z <= 0:
            raise GeometryError(f"altitude must be positive, got z={self.z}")


@dataclass(frozen=True)
class DroneState:
    x: float
    y: float
    z: float
    theta: float = 0.0

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x, self.y, self.z, self.theta)):
            raise GeometryError(f"non-finite drone state {self}")
        if self.z <= 0:
            raise GeometryError(f"altitude must be positive, got z={self.z}")
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    @property
    def position(self) -> Position:
        return Position(self.x, self.y, self.z)


@dataclass(frozen=True)
class Action:
    dx: float
    dy: float
    dz: float
    stop: bool = False

    @property
    def magnitude(self) -> float:
        return math.sqrt(self.dx * self.dx + self.dy * self.dy + self.dz * self.dz)

    def capped(self, max_step: float) -> "Action":
        m = self.magnitude
        if m <= max_step or m == 0.0:
            return self
        f = max_step / m
        return Action(self.dx * f, self.dy * f, self.dz * f, self.stop)


@dataclass(frozen=True)
class ViewArea:
    """Ground footprint as 4 counter-clockwise (x, y) corners."""

    corners: tuple

    def __post_init__(self):
        pts = np.asarray(self.corners, dtype=float)
        if pts.shape != (4, 2) or not np.all(np.isfinite(pts)):
            raise GeometryError("a view area needs 4 finite (x, y) corners")
        object.__setattr__(self, "corners", tuple(tuple(float(v) for v in p) for p in pts))
        if polygon_area(pts) <= 0:
            raise GeometryError("view area corners must be counter-clockwise with positive area")

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.corners, dtype=float)

    @property
    def center(self) -> np.ndarray:
        return self.array.mean(axis=0)

    @property
    def area(self) -> float:
        return polygon_area(self.array)


@dataclass
class Trajectory:
    areas: list
    states: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.areas) < 1:
            raise GeometryError("a trajectory needs at least one view area")
        if self.states and len(self.states) != len(self.areas):
            raise GeometryError("states and areas must be parallel lists")

    @property
    def target(self) -> ViewArea:
        return self.areas[-1]


@dataclass(frozen=True)
class MetricReport:
    sr: float
    spl: float
    gp: float
    n_episodes: int

    def as_dict(self) -> dict:
        return {"spl": self.spl, "sr": self.sr, "gp": self.gp, "n_episodes": self.n_episodes}


# ---------------------------------------------------------------------------
# polygons
# ---------------------------------------------------------------------------

def polygon_area(pts: np.ndarray) -> float:
    """Signed shoelace area; positive for counter-clockwise order."""
    if len(pts) < 3:
        return 0.0
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def _clip(subject: list, a: np.ndarray, b: np.ndarray) -> list:
    """Keep the part of ``subject`` left of the directed edge a->b."""
    out = []
    if not subject:
        return out
    edge = b - a

    def side(p):
        return edge[0] * (p[1] - a[1]) - edge[1] * (p[0] - a[0])

    prev = subject[-1]
    s_prev = side(prev)
    for cur in subject:
        s_cur = side(cur)
        if s_cur >= 0:
            if s_prev < 0:
                t = s_prev / (s_prev - s_cur)
                out.append(prev + t * (cur - prev))
            out.append(cur)
        elif s_prev >= 0:
            t = s_prev / (s_prev - s_cur)
            out.append(prev + t * (cur - prev))
        prev, s_prev = cur, s_cur
    return out


def convex_intersection_area(p: np.ndarray, q: np.ndarray) -> float:
    """Area of the intersection of two CCW convex polygons (Sutherland-Hodgman)."""
    poly = [np.asarray(v, dtype=float) for v in p]
    n = len(q)
    for i in range(n):
        poly = _clip(poly, q[i], q[(i + 1) % n])
        if not poly:
            return 0.0
    return max(polygon_area(np.asarray(poly)), 0.0)


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def rotation(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def footprint_side(z: float, fov: float) -> float:
    return 2.0 * z * math.tan(fov / 2.0)


def view_area_from_state(state: DroneState, fov: float = math.pi / 2) -> ViewArea:
    if state.z <= 0:
        raise GeometryError("altitude must be positive")
    if not 0 < fov < math.pi:
        raise GeometryError(f"field of view must lie in (0, pi), got {fov}")
    half = footprint_side(state.z, fov) / 2.0
    local = np.array([[-half, -half], [half, -half], [half, half], [-half, half]])
    corners = local @ rotation(state.theta).T + np.array([state.x, state.y])
    return ViewArea(tuple(map(tuple, corners)))


def rect_iou(a: ViewArea, b: ViewArea) -> float:
    area_a, area_b = a.area, b.area
    if area_a <= 0 or area_b <= 0:
        raise GeometryError("IoU of a degenerate view area is undefined")
    inter = convex_intersection_area(a.array, b.array)
    union = area_a + area_b - inter
    return min(max(inter / union, 0.0), 1.0)


def is_success(final: ViewArea, target: ViewArea) -> bool:
    return rect_iou(final, target) > SUCCESS_IOU


def pairwise_distance_matrix(positions: Sequence) -> np.ndarray:
    """Planar L2 distances between positions; altitude is ignored."""
    if len(positions) == 0:
        raise GeometryError("distance matrix of an empty position list")
    xy = np.array([[p.x, p.y] if hasattr(p, "x") else p[:2] for p in positions], dtype=float)
    diff = xy[:, None, :] - xy[None, :, :]
    return np.hypot(diff[..., 0], diff[..., 1])


def path_length(traj: Trajectory) -> float:
    centers = np.array([a.center for a in traj.areas])
    if len(centers) < 2:
        return 0.0
    steps = np.diff(centers, axis=0)
    return float(np.hypot(steps[:, 0], steps[:, 1]).sum())


def _dist(p, q) -> float:
    return float(math.hypot(p[0] - q[0], p[1] - q[1]))


def episode_terms(predicted: Trajectory, truth: Trajectory) -> tuple[float, float, float]:
    """(success indicator, SPL term, goal progress) for one episode."""
    target = truth.target
    start = truth.areas[0].center
    goal = target.center
    success = 1.0 if is_success(predicted.areas[-1], target) else 0.0
    shortest = _dist(start, goal)
    taken = path_length(predicted)
    if success and max(taken, shortest) == 0.0:
        spl = 1.0
    else:
        spl = success * shortest / max(taken, shortest) if success else 0.0
    progress = shortest - _dist(predicted.areas[-1].center, goal)
    return success, spl, progress


def compute_metrics(episodes: Sequence[tuple[Trajectory, Trajectory]], failed: Sequence[bool] | None = None) -> MetricReport:
    """SR, SPL and GP averaged over (predicted, ground-truth) pairs.

    ``failed`` marks episodes that must count as failures regardless of
    where they ended (e.g. the agent left the world).
    """
    if len(episodes) == 0:
        raise GeometryError("cannot compute metrics over zero episodes")
    failed = [False] * len(episodes) if failed is None else list(failed)
    terms = []
    for (pred, gt), bad in zip(episodes, failed):
        success, spl, gp = episode_terms(pred, gt)
        terms.append((0.0, 0.0, gp) if bad else (success, spl, gp))
    terms.sort()
    # sorted + math.fsum keeps the result independent of episode order
    sr = math.fsum(t[0] for t in terms) / len(terms)
    spl = math.fsum(t[1] for t in terms) / len(terms)
    gp = math.fsum(t[2] for t in terms) / len(terms)
    return MetricReport(sr=sr, spl=spl, gp=gp, n_episodes=len(terms))
