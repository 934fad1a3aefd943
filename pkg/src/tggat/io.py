"""Dataset files: episodes as JSON lines, one JSON file per world, plus a small
dataset descriptor.

Layout of a dataset directory::

    dataset.json          generation flags
    episodes.jsonl        one episode per line
    worlds/<ref>.json     {"h", "w", "scale_m", "cells": [[class, color], ...]} row-major
"""
from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .env import Episode, EnvConfig, GenerationError, World, episode_from_states
from .geometry import DroneState, ViewArea
from .losses import GroundingTarget


class DataError(ValueError):
    pass


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


# ---------------------------------------------------------------------------
# worlds
# ---------------------------------------------------------------------------

def world_to_dict(world: World) -> dict:
    cells = np.stack([world.cls.reshape(-1), world.color.reshape(-1)], axis=1)
    return {"h": world.h, "w": world.w, "scale_m": world.scale_m, "cells": cells.tolist()}


def world_from_dict(d: dict) -> World:
    try:
        return World.from_cells(int(d["h"]), int(d["w"]), float(d["scale_m"]), d["cells"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed world: {exc}") from None


# ---------------------------------------------------------------------------
# episodes
# ---------------------------------------------------------------------------

def episode_to_dict(ep: Episode) -> dict:
    return {
        "seed": int(ep.seed),
        "world_ref": ep.world_ref,
        "dialog": [{"role": role, "text": text} for role, text in ep.dialog],
        "trajectory": [a.array.tolist() for a in ep.trajectory.areas],
        "target": ep.target.array.tolist(),
        "grounding": [{"c": g.c, "box": g.box.tolist()} for g in ep.grounding],
        "attention": [np.asarray(m, dtype=int).tolist() for m in ep.attention],
    }


def state_from_corners(corners, fov: float) -> DroneState:
    """Invert the footprint construction: centre, altitude from side, heading from the first edge."""
    c = np.asarray(corners, dtype=float)
    center = c.mean(axis=0)
    edge = c[1] - c[0]
    side = math.hypot(*edge)
    z = side / (2.0 * math.tan(fov / 2.0))
    return DroneState(float(center[0]), float(center[1]), z, math.atan2(edge[1], edge[0]))


def episode_from_dict(d: dict, world: World, cfg: EnvConfig = EnvConfig()) -> Episode:
    """Rebuild an episode; labels are re-rendered and must match the stored ones."""
    try:
        dialog = [(r["role"], r["text"]) for r in d["dialog"]]
        states = [state_from_corners(c, cfg.fov) for c in d["trajectory"]]
        target = ViewArea(np.asarray(d["target"], dtype=float))
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed episode: {exc}") from None
    try:
        lm = world.landmark_at(*target.center)
    except GenerationError as exc:
        raise DataError(f"episode {d.get('seed')}: target is not on a landmark ({exc})") from None
    ep = episode_from_states(int(d["seed"]), d["world_ref"], dialog, states, world, lm.rect(world.scale_m), cfg)
    stored = [GroundingTarget(g["c"], g["box"]) for g in d["grounding"]]
    if [g.c for g in stored] != [g.c for g in ep.grounding]:
        raise DataError(f"episode {d['seed']}: stored grounding labels disagree with the world")
    return ep


# ---------------------------------------------------------------------------
# dataset directories
# ---------------------------------------------------------------------------

def write_dataset(out_dir, worlds: dict, episodes, meta: dict | None = None) -> list[Path]:
    """Write worlds, episodes and descriptor; returns the written paths."""
    out = Path(out_dir)
    (out / "worlds").mkdir(parents=True, exist_ok=True)
    written = []
    for ref, world in worlds.items():
        p = out / "worlds" / f"{ref}.json"
        p.write_text(_dumps(world_to_dict(world)) + "\n")
        written.append(p)
    p = out / "episodes.jsonl"
    with open(p, "w") as fh:
        for ep in episodes:
            fh.write(_dumps(episode_to_dict(ep)) + "\n")
    written.append(p)
    p = out / "dataset.json"
    p.write_text(_dumps(meta or {}) + "\n")
    written.append(p)
    return written


def read_dataset(data_dir, cfg: EnvConfig = EnvConfig()):
    """Returns (worlds, episodes, meta). Raises FileNotFoundError / DataError."""
    root = Path(data_dir)
    ep_path = root / "episodes.jsonl"
    if not ep_path.is_file():
        raise FileNotFoundError(f"no episodes.jsonl in {root}")
    meta_path = root / "dataset.json"
    meta = json.loads(meta_path.read_text()) if meta_path.is_file() else {}
    worlds, episodes = {}, []
    with open(ep_path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"episodes.jsonl line {lineno}: {exc}") from None
            ref = d.get("world_ref")
            if ref not in worlds:
                wpath = root / "worlds" / f"{ref}.json"
                if not wpath.is_file():
                    raise FileNotFoundError(f"missing world file {wpath}")
                worlds[ref] = world_from_dict(json.loads(wpath.read_text()))
            episodes.append(episode_from_dict(d, worlds[ref], cfg))
    return worlds, episodes, meta
