import math

import numpy as np
import pytest

from tggat.augment import AugConfig, augment_observation, box_blur
from tggat.env import (EnvConfig, Landmark, RenderError, World, apply_action, generate_dataset,
                       generate_episode, generate_world, oracle_action, render_observation,
                       rollout_oracle, target_box)
from tggat.geometry import Action, DroneState, Trajectory, is_success, view_area_from_state
from tggat.language import parse_instruction

CFG = EnvConfig()


def one_landmark_world(row, col, h=1, w=1, cls=2, color=3, n=16):
    grid_cls = np.zeros((n, n), int)
    grid_color = np.zeros((n, n), int)
    grid_cls[row:row + h, col:col + w] = cls
    grid_color[row:row + h, col:col + w] = color
    return World(grid_cls, grid_color, 10.0, [Landmark(cls, color, row, col, h, w)])


def test_world_determinism_and_landmark_count():
    a, b = generate_world(5), generate_world(5)
    assert np.array_equal(a.cls, b.cls) and np.array_equal(a.color, b.color)
    assert CFG.n_landmarks[0] <= len(a.landmarks) <= CFG.n_landmarks[1]
    layouts = {generate_world(s).cls.tobytes() for s in range(100)}
    assert len(layouts) == 100


def test_landmarks_do_not_touch():
    w = generate_world(3)
    occupied = np.zeros_like(w.cls, dtype=int)
    for lm in w.landmarks:
        occupied[lm.row:lm.row + lm.height, lm.col:lm.col + lm.width] += 1
    assert occupied.max() == 1
    assert np.count_nonzero(w.cls) == occupied.sum()


def test_landmark_north_appears_in_top_rows():
    world = one_landmark_world(row=10, col=8)   # cell centre (85, 105)
    obs, tgt, mask = render_observation(world, DroneState(80.0, 80.0, 40.0, 0.0), CFG, world.landmarks[0].rect(10))
    lm_rows = np.nonzero(obs[1].any(axis=1))[0]   # class index 2 -> channel 1
    assert lm_rows.max() < 4
    assert tgt.c == 1 and tgt.box[1] < 0.5
    assert mask.any()


def test_quarter_turn_rotates_the_grid():
    world = one_landmark_world(row=9, col=10, w=2)
    s0 = DroneState(80.0, 80.0, 40.0, 0.0)
    s1 = DroneState(80.0, 80.0, 40.0, math.pi / 2)
    o0 = render_observation(world, s0, CFG)[0]
    o1 = render_observation(world, s1, CFG)[0]
    # turning left by 90 degrees turns the picture clockwise
    assert np.array_equal(o1, np.rot90(o0, k=-1, axes=(1, 2)))


def test_doubling_altitude_halves_the_box():
    world = one_landmark_world(row=8, col=8)
    rect = world.landmarks[0].rect(10)
    low = target_box(DroneState(82.0, 83.0, 20.0), rect, CFG)
    high = target_box(DroneState(82.0, 83.0, 40.0), rect, CFG)
    assert low.c == high.c == 1
    assert low.box[2] == pytest.approx(2 * high.box[2])
    assert low.box[3] == pytest.approx(2 * high.box[3])


def test_render_outside_world_raises():
    world = one_landmark_world(2, 2)
    with pytest.raises(RenderError):
        render_observation(world, DroneState(-500.0, -500.0, 40.0), CFG)


def test_observation_channels():
    world = generate_world(1)
    obs, _, _ = render_observation(world, DroneState(240.0, 240.0, 40.0), CFG)
    assert obs.shape == (CFG.n_channels, CFG.grid, CFG.grid)
    assert set(np.unique(obs)) <= {0.0, 1.0}
    assert obs[-1].all()                       # fully inside the world
    assert np.array_equal(obs[:6].sum(0), obs[6:12].sum(0))   # class and colour agree


def test_apply_action_examples():
    s = DroneState(10.0, 20.0, 40.0, 1.0)
    assert apply_action(s, Action(0, 0, 0)) == s
    assert apply_action(s, Action(0, 5, 0)).theta == pytest.approx(math.pi / 2)
    assert apply_action(s, Action(0, 0, -100)).z == CFG.z_min
    assert apply_action(s, Action(0, 0, 500)).z == CFG.z_max


def test_oracle_examples():
    gt = Trajectory([view_area_from_state(DroneState(0, 400, 40))], [DroneState(0, 400, 40)])
    far = oracle_action(DroneState(0, 0, 40), gt, CFG)
    assert (far.dx, far.dy, far.dz, far.stop) == pytest.approx((0.0, CFG.max_step, 0.0, False))
    at = oracle_action(DroneState(0, 400, 40), gt, CFG)
    assert at.stop and (at.dx, at.dy, at.dz) == (0, 0, 0)
    two = [DroneState(0, 0, 40), DroneState(0, 15, 40), DroneState(0, 200, 40)]
    gt2 = Trajectory([view_area_from_state(s) for s in two], two)
    near = oracle_action(DroneState(0, -30, 40), gt2, CFG)
    assert near.magnitude == pytest.approx(30.0)   # no overshoot of the first waypoint
    inside = oracle_action(DroneState(0, -10, 40), gt2, CFG)
    assert inside.magnitude == pytest.approx(25.0)  # within the radius: aim at the next one


def test_episode_contracts(small_data):
    worlds, episodes = small_data
    for ep in episodes:
        world = worlds[ep.world_ref]
        assert ep.trajectory.areas[-1] is ep.target
        _, slots = parse_instruction(ep.instruction)
        color, cls = world.landmark_at(*ep.target.center).words
        assert (slots["color"], slots["cls"]) == (color, cls)
        visited = rollout_oracle(ep.states[0], ep.trajectory, CFG)
        assert len(visited) <= CFG.max_steps
        assert is_success(view_area_from_state(visited[-1]), ep.target)
        for g, m in zip(ep.grounding, ep.attention):
            assert (g.c == 1) == bool(m.any())


def test_north_episode_moves_north():
    world = generate_world(2)
    for seed in range(200):
        ep = generate_episode(world, seed)
        if parse_instruction(ep.instruction)[1]["cardinal"] == "north":
            a = oracle_action(ep.states[0], ep.trajectory)
            assert a.dy > 0 and a.dx == pytest.approx(0.0, abs=1e-9)
            return
    pytest.fail("no north-bound episode in 200 seeds")


def test_dataset_determinism():
    _, a = generate_dataset(2, 6, 9)
    _, b = generate_dataset(2, 6, 9)
    assert [e.dialog for e in a] == [e.dialog for e in b]
    assert all(sa == sb for ea, eb in zip(a, b) for sa, sb in zip(ea.states, eb.states))


def test_augment_identity_and_determinism(rng):
    obs = rng.random((13, 8, 8))
    assert augment_observation(obs, AugConfig(p=0.0), 3) is obs
    cfg = AugConfig(p=1.0)
    a = augment_observation(obs, cfg, 11)
    assert np.array_equal(a, augment_observation(obs, cfg, 11))
    assert not np.array_equal(a, obs)
    with pytest.raises(ValueError):
        AugConfig(p=1.5)


def test_blur_of_constant_grid_is_constant():
    obs = np.full((2, 8, 8), 0.7)
    assert np.allclose(box_blur(obs), 0.7)
