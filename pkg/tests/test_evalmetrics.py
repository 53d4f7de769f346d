import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mdg.errors import ContractError
from mdg.evalmetrics import (
    SceneEval, collision_flags, collision_rate, evaluate, format_csv, format_table, goal_reach_rate,
    minsade, offroad_rate, on_road, plan_consistency, point_sampling_overlap, sade,
)
from mdg.synthworld import PEDESTRIAN

from scenetools import transform_scene


def corners(b):
    c, s = math.cos(b[2]), math.sin(b[2])
    out = []
    for u, v in ((1, 1), (1, -1), (-1, -1), (-1, 1)):
        du, dv = u * b[3] / 2, v * b[4] / 2
        out.append((b[0] + c * du - s * dv, b[1] + s * du + c * dv))
    return out


def penetration(a, b):
    """Smallest interval overlap over the four box axes; negative means a gap."""
    ca, cb = corners(a), corners(b)
    depth = math.inf
    for th in (a[2], a[2] + math.pi / 2, b[2], b[2] + math.pi / 2):
        ax = (math.cos(th), math.sin(th))
        pa = [p[0] * ax[0] + p[1] * ax[1] for p in ca]
        pb = [p[0] * ax[0] + p[1] * ax[1] for p in cb]
        depth = min(depth, min(max(pa), max(pb)) - max(min(pa), min(pb)))
    return depth


def two_boxes(a, b):
    traj = np.array([[[a[:3]], [b[:3]]]])
    return collision_flags(traj, np.array([a[3:], b[3:]]))[0, 0]


def test_sat_matches_point_sampling_fuzz():
    rng = np.random.default_rng(0)
    checked = hits = 0
    while checked < 1000:
        a = np.array([0.0, 0.0, rng.uniform(-np.pi, np.pi), rng.uniform(0.5, 5), rng.uniform(0.5, 2.5)])
        b = np.array([*rng.uniform(-5, 5, 2), rng.uniform(-np.pi, np.pi), rng.uniform(0.5, 5), rng.uniform(0.5, 2.5)])
        if abs(penetration(a, b)) < 0.1:
            continue                      # grid spacing cannot resolve near-contact
        oracle = point_sampling_overlap(a, b) or point_sampling_overlap(b, a)
        assert two_boxes(a, b) == oracle
        checked += 1
        hits += oracle
    assert 100 < hits < 900


def test_collision_examples():
    apart = np.array([[[[0, 0, 0]], [[5, 0, 0]]]], dtype=float)
    ext = np.array([[4.0, 2.0], [4.0, 2.0]])
    assert not collision_flags(apart, ext).any()
    apart[0, 1, 0, 0] = 3.0
    assert collision_flags(apart, ext).all()


def test_collision_rate_counts_modeled_only():
    traj = np.zeros((1, 3, 1, 3))
    traj[0, 2, 0, 0] = 50.0
    s = SceneEval(traj, np.zeros((3, 1, 3)), np.full((3, 2), 2.0), modeled=[False, False, True])
    assert collision_rate([s]) == 0.0
    s = SceneEval(traj, np.zeros((3, 1, 3)), np.full((3, 2), 2.0), modeled=[True, True, True])
    assert collision_rate([s]) == pytest.approx(2 / 3)


def test_bad_extents():
    with pytest.raises(ContractError):
        collision_flags(np.zeros((1, 2, 1, 3)), np.array([[1.0, 0.0], [1.0, 1.0]]))


def test_sade_constant_offset():
    gt = np.zeros((1, 5, 3))
    traj = gt[None].copy()
    traj[..., 1] += 1.0
    s = SceneEval(traj, gt, np.ones((1, 2)), [True])
    assert sade([s]) == 1.0 and minsade([s]) == 1.0


def test_sade_mean_vs_min():
    gt = np.zeros((1, 4, 3))
    traj = np.zeros((2, 1, 4, 3))
    traj[0, ..., 0] = 2.0
    traj[1, ..., 0] = 0.5
    s = SceneEval(traj, gt, np.ones((1, 2)), [True])
    assert sade([s]) == 1.25 and minsade([s]) == 0.5


def test_sade_scalar_hand_computation():
    rng = np.random.default_rng(3)
    scenes, ref_mean, ref_min = [], [], []
    for _ in range(3):
        gt = rng.normal(size=(3, 6, 3))
        traj = gt[None] + rng.normal(size=(4, 3, 6, 3))
        modeled = [True, False, True]
        scenes.append(SceneEval(traj, gt, np.ones((3, 2)), modeled))
        per_sample = []
        for k in range(4):
            total, n = 0.0, 0
            for i in (0, 2):
                for t in range(6):
                    total += math.dist(traj[k, i, t, :2], gt[i, t, :2])
                    n += 1
            per_sample.append(total / n)
        ref_mean.append(sum(per_sample) / 4)
        ref_min.append(min(per_sample))
    assert sade(scenes) == pytest.approx(sum(ref_mean) / 3, rel=1e-12)
    assert minsade(scenes) == pytest.approx(sum(ref_min) / 3, rel=1e-12)


def _gr_scene(dist):
    traj = np.zeros((1, 2, 3, 3))
    traj[0, 0, -1, :2] = (dist, 0.0)
    return SceneEval(traj, np.zeros((2, 3, 3)), np.ones((2, 2)), [True, True], goals={0: (0.0, 0.0)})


def test_goal_reach_boundary():
    assert goal_reach_rate([_gr_scene(0.5)]) == 1.0
    assert goal_reach_rate([_gr_scene(1.0)]) == 0.0
    assert goal_reach_rate([_gr_scene(np.nextafter(1.0, 0.0))]) == 1.0


def test_goal_reach_excludes_targetless_scenes():
    empty = SceneEval(np.zeros((1, 1, 2, 3)), np.zeros((1, 2, 3)), np.ones((1, 2)), [True])
    assert goal_reach_rate([_gr_scene(0.2), empty, _gr_scene(3.0)]) == 0.5
    assert math.isnan(goal_reach_rate([empty]))


def test_goal_reach_averages_per_scene():
    traj = np.zeros((2, 2, 1, 3))
    traj[1, 1, 0, 0] = 5.0
    s = SceneEval(traj, np.zeros((2, 1, 3)), np.ones((2, 2)), [True, True], goals={0: (0.0, 0.0), 1: (0.0, 0.0)})
    assert goal_reach_rate([s, _gr_scene(9.0)]) == pytest.approx((3 / 4 + 0.0) / 2)


def test_offroad_oracle():
    lanes = np.array([[[x, 0.0, 0.0] for x in np.linspace(0, 100, 11)]])
    traj = np.zeros((1, 3, 2, 3))
    traj[0, :, :, 0] = 50.0
    traj[0, 0, 1, 1] = 2.5       # leaves the road
    traj[0, 1, 1, 1] = 1.9       # stays on
    traj[0, 2, :, 1] = 9.0       # starts off the road, excluded
    s = SceneEval(traj, np.zeros((3, 2, 3)), np.ones((3, 2)), [True] * 3, lanes=lanes)
    assert offroad_rate([s]) == 0.5
    s.types = np.array([PEDESTRIAN, 0, 0])
    assert offroad_rate([s]) == 0.0
    assert on_road(np.array([[50.0, 2.0]]), lanes)[0]


def test_offroad_needs_lanes():
    s = SceneEval(np.zeros((1, 1, 2, 3)), np.zeros((1, 2, 3)), np.ones((1, 2)), [True])
    with pytest.raises(ContractError):
        offroad_rate([s])


def test_plan_consistency_examples():
    p = np.cumsum(np.ones((20, 2)), axis=0)
    assert plan_consistency([(0, p), (10, p[10:])]) == 0.0
    assert plan_consistency([(0, p), (5, p[5:] + [0.0, 1.0])]) == pytest.approx(1.0)


def test_plan_consistency_three_plan_scalar():
    rng = np.random.default_rng(4)
    plans = [(0, rng.normal(size=(8, 2))), (3, rng.normal(size=(8, 2))), (6, rng.normal(size=(8, 2)))]
    pair = []
    for (t0, a), (t1, b) in zip(plans[:-1], plans[1:]):
        d = [math.dist(a[t - t0], b[t - t1]) for t in range(t1, min(t0 + 8, t1 + 8))]
        pair.append(sum(d) / len(d))
    assert plan_consistency(plans) == pytest.approx(sum(pair) / 2, rel=1e-12)


def test_plan_consistency_needs_two():
    with pytest.raises(ContractError):
        plan_consistency([(0, np.zeros((4, 2)))])


def test_sample_count_uniform():
    a = SceneEval(np.zeros((1, 1, 2, 3)), np.zeros((1, 2, 3)), np.ones((1, 2)), [True])
    b = SceneEval(np.zeros((2, 1, 2, 3)), np.zeros((1, 2, 3)), np.ones((1, 2)), [True])
    with pytest.raises(ContractError):
        sade([a, b])


def test_report_formats():
    rep = evaluate([_gr_scene(0.3)], ("SADE", "GR"))
    assert rep["GR"] == (1.0, 1)
    assert format_csv(rep).splitlines()[0] == "metric,value,count"
    assert "GR" in format_table(rep)
    with pytest.raises(ContractError):
        evaluate([_gr_scene(0.3)], ("XX",))


def _random_scene(rng, n=4, s=3, t=5):
    lanes = np.stack([np.column_stack([np.linspace(-30, 30, 16), np.full(16, y), np.zeros(16)]) for y in (-4, 0, 4)])
    gt = np.concatenate([rng.uniform(-20, 20, (n, t, 1)), rng.uniform(-5, 5, (n, t, 1)), rng.uniform(-3, 3, (n, t, 1))], -1)
    traj = gt[None] + rng.normal(0, 1.5, (s, n, t, 3))
    return SceneEval(traj, gt, rng.uniform(1, 4, (n, 2)), rng.random(n) < 0.8, lanes=lanes,
                     goals={0: tuple(gt[0, -1, :2] + rng.normal(0, 1, 2))})


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6), st.floats(-math.pi, math.pi), st.floats(-100, 100), st.floats(-100, 100))
def test_metrics_invariant_to_rigid_motion_and_reordering(seed, phi, tx, ty):
    rng = np.random.default_rng(seed)
    scenes = [_random_scene(rng) for _ in range(2)]
    moved = [transform_scene(s, phi, np.array([tx, ty]), rng.permutation(4)) for s in scenes]
    a, b = evaluate(scenes), evaluate(moved)
    for k in a:
        assert abs(a[k][0] - b[k][0]) < 1e-9, k
    assert a["minSADE"][0] <= a["SADE"][0] + 1e-12
