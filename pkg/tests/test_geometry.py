import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tggat.geometry import (Action, DroneState, GeometryError, MetricReport, Trajectory, ViewArea,
                            compute_metrics, convex_intersection_area, episode_terms, is_success,
                            pairwise_distance_matrix, path_length, polygon_area, rect_iou,
                            view_area_from_state, wrap_angle)


def square(x, y, side, theta=0.0):
    # side = 2 z tan(pi/4) = 2 z at the default field of view
    return view_area_from_state(DroneState(x, y, side / 2.0, theta))


coord = st.floats(-200, 200, allow_nan=False)
angle = st.floats(0, 2 * math.pi, allow_nan=False)
alt = st.floats(5, 100, allow_nan=False)


def test_wrap_angle_range():
    assert wrap_angle(-math.pi / 2) == pytest.approx(3 * math.pi / 2)
    assert wrap_angle(2 * math.pi) == 0.0
    assert 0 <= wrap_angle(-1e-18) < 2 * math.pi


def test_state_rejects_bad_altitude():
    with pytest.raises(GeometryError):
        DroneState(0, 0, 0)
    with pytest.raises(GeometryError):
        DroneState(0, 0, float("nan"))


def test_action_cap_preserves_direction():
    a = Action(30.0, 40.0, 0.0).capped(10.0)
    assert a.magnitude == pytest.approx(10.0)
    assert (a.dx, a.dy) == pytest.approx((6.0, 8.0))
    small = Action(1.0, 1.0, 0.0)
    assert small.capped(10.0) == small


def test_view_area_orientation_and_size():
    area = view_area_from_state(DroneState(10, 20, 40, 0.0))
    assert area.area == pytest.approx(80.0 ** 2)
    assert np.allclose(area.center, [10, 20])
    # first corner is back-right of heading 0: (-h, -h)
    assert np.allclose(area.array[0], [-30, -20])
    with pytest.raises(GeometryError):
        ViewArea(((0, 0), (0, 1), (1, 1), (1, 0)))  # clockwise


def test_iou_identity_and_disjoint():
    a = square(0, 0, 80)
    assert rect_iou(a, a) == pytest.approx(1.0)
    assert rect_iou(a, square(500, 0, 80)) == 0.0


@pytest.mark.parametrize("dx,dy", [(10, 0), (0, 25), (30, 30), (-45, 12), (79, 0)])
def test_iou_axis_aligned_offset_matches_closed_form(dx, dy):
    s = 80.0
    inter = (s - abs(dx)) * (s - abs(dy))
    expected = inter / (2 * s * s - inter)
    assert rect_iou(square(0, 0, s), square(dx, dy, s)) == pytest.approx(expected, abs=1e-12)


def test_iou_square_vs_its_45_degree_rotation():
    # the overlap is a regular octagon; IoU is exactly 1/sqrt(2)
    assert rect_iou(square(3, 4, 50), square(3, 4, 50, math.pi / 4)) == pytest.approx(1 / math.sqrt(2), abs=1e-12)


def test_unit_squares_offset_by_half():
    a = ViewArea(((0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)))
    b = ViewArea(((0.5, 0.0), (1.5, 0.0), (1.5, 1.0), (0.5, 1.0)))
    assert rect_iou(a, b) == pytest.approx(1 / 3, abs=1e-12)


def test_nested_squares():
    big, small = square(0, 0, 100), square(5, -5, 40, 0.3)
    assert rect_iou(big, small) == pytest.approx(40 ** 2 / 100 ** 2, abs=1e-12)


def test_success_is_strict_at_threshold():
    # side 7 offset 3: intersection 28, union 70, IoU exactly 0.4
    def box(x0):
        return ViewArea(((x0, 0.0), (x0 + 7.0, 0.0), (x0 + 7.0, 7.0), (x0, 7.0)))
    a = box(0.0)
    assert rect_iou(a, box(3.0)) == 0.4
    assert not is_success(a, box(3.0))
    assert is_success(a, box(2.9))


@settings(max_examples=200, deadline=None)
@given(coord, coord, alt, angle, coord, coord, alt, angle)
def test_iou_properties(x1, y1, z1, t1, x2, y2, z2, t2):
    a = view_area_from_state(DroneState(x1, y1, z1, t1))
    b = view_area_from_state(DroneState(x2, y2, z2, t2))
    iou = rect_iou(a, b)
    assert 0.0 <= iou <= 1.0
    assert iou == pytest.approx(rect_iou(b, a), abs=1e-12)
    shifted = lambda v: ViewArea(tuple(map(tuple, v.array + [13.5, -7.25])))
    assert iou == pytest.approx(rect_iou(shifted(a), shifted(b)), abs=1e-9)


def test_intersection_area_of_triangle_and_square():
    sq = np.array([[0, 0], [2, 0], [2, 2], [0, 2]], float)
    tri = np.array([[0, 0], [4, 0], [0, 4]], float)
    # the square lies under the hypotenuse x + y <= 4 entirely
    assert convex_intersection_area(sq, tri) == pytest.approx(4.0)
    assert polygon_area(tri) == pytest.approx(8.0)


def test_distance_matrix():
    E = pairwise_distance_matrix([DroneState(0, 0, 10), DroneState(3, 4, 99), DroneState(-3, -4, 1)])
    assert np.allclose(E, [[0, 5, 5], [5, 0, 10], [5, 10, 0]])
    assert np.array_equal(E, E.T)
    with pytest.raises(GeometryError):
        pairwise_distance_matrix([])


def traj(points, z=40.0):
    states = [DroneState(x, y, z) for x, y in points]
    return Trajectory([view_area_from_state(s) for s in states], states)


def test_episode_terms_straight_path():
    gt = traj([(0, 0), (40, 0), (80, 0)])
    success, spl, gp = episode_terms(gt, gt)
    assert (success, spl, gp) == (1.0, 1.0, 80.0)
    # a detour that ends on target: success, SPL = d / p
    detour = traj([(0, 0), (0, 30), (80, 30), (80, 0)])
    success, spl, gp = episode_terms(detour, gt)
    assert success == 1.0
    assert spl == pytest.approx(80 / 140)
    assert gp == pytest.approx(80.0)


def test_gp_equals_start_distance_when_ending_on_target():
    gt = traj([(10, 10), (40, 50)])
    wander = traj([(10, 10), (-20, 0), (40, 50)])
    assert episode_terms(wander, gt)[2] == pytest.approx(50.0)


def test_failure_has_zero_spl_but_partial_progress():
    gt = traj([(0, 0), (100, 0)])
    short = traj([(0, 0), (30, 0)])
    success, spl, gp = episode_terms(short, gt)
    assert (success, spl) == (0.0, 0.0)
    assert gp == pytest.approx(30.0)


def test_path_length():
    assert path_length(traj([(0, 0), (3, 4), (3, 10)])) == pytest.approx(11.0)
    assert path_length(traj([(1, 1)])) == 0.0


def test_compute_metrics_and_forced_failures():
    gt = traj([(0, 0), (80, 0)])
    report = compute_metrics([(gt, gt), (traj([(0, 0)]), gt)])
    assert isinstance(report, MetricReport)
    assert (report.sr, report.spl, report.gp) == (0.5, 0.5, 40.0)
    forced = compute_metrics([(gt, gt)], failed=[True])
    assert (forced.sr, forced.spl, forced.gp) == (0.0, 0.0, 80.0)
    assert list(report.as_dict())[:3] == ["spl", "sr", "gp"]
    with pytest.raises(GeometryError):
        compute_metrics([])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.lists(st.tuples(coord, coord), min_size=1, max_size=5),
                          st.tuples(coord, coord), st.tuples(coord, coord)), min_size=1, max_size=8))
def test_spl_never_exceeds_sr_and_order_does_not_matter(cases):
    pairs = []
    for path, start, goal in cases:
        pairs.append((traj([start] + path), traj([start, goal])))
    report = compute_metrics(pairs)
    assert 0.0 <= report.spl <= report.sr <= 1.0
    flipped = compute_metrics(pairs[::-1])
    assert (flipped.sr, flipped.spl, flipped.gp) == (report.sr, report.spl, report.gp)
