import numpy as np
import pytest

from mdg.errors import ContractError
from mdg.inference import (
    _featurize, closed_loop_step, constant_velocity, generate, goal_objective, local_goals, read_trace,
    run_episode, shift_actions, trace_header, trace_rows,
)
from mdg.kinematics import rollout
from mdg.model import MDGModel, ModelConfig
from mdg.noisefield import build_schedule

SMALL = ModelConfig(d_model=16, n_heads=2, enc_layers=1, dec_blocks=1, n_freq=4, n_modes=3, max_map=8)


@pytest.fixture(scope="module")
def model():
    return MDGModel(SMALL, seed=2)


@pytest.fixture(scope="module")
def scenes(small_scenes):
    return small_scenes[:3]


@pytest.mark.parametrize("mode,steps", [("one_step", 1), ("temporal", 5), ("agent", 3), ("temporal", 20)])
def test_call_count_equals_schedule_length(model, scenes, mode, steps):
    res = generate(model, scenes, mode, steps)
    assert res.denoiser_calls == steps and res.guidance_calls == 0
    assert len(res.masks) == steps


def test_output_shapes(model, scenes):
    res = generate(model, scenes, num_samples=2)
    N = max(s.n_agents for s in scenes)
    assert res.actions.shape == (3, 2, N, 20, 2)
    assert res.states.shape == (3, 2, N, 40, 5)


def test_seeded_determinism(model, scenes):
    a = generate(model, scenes, "temporal", 3, num_samples=2, seed=5)
    b = generate(model, scenes, "temporal", 3, num_samples=2, seed=5)
    c = generate(model, scenes, "temporal", 3, num_samples=2, seed=6)
    assert np.array_equal(a.states, b.states)
    assert not np.array_equal(a.states, c.states)
    assert not np.array_equal(a.actions[:, 0], a.actions[:, 1])


def test_world_states_match_local_rollout(model, scenes):
    res = generate(model, scenes[:1])
    sc = scenes[0]
    ego = sc.ego
    start = res.states[0, 0, ego, 0, :2]
    # the first step moves less than 1.5 m from the current position
    assert np.hypot(*(start - sc.current[ego, :2])) < 1.5


def test_empty_guidance_matches_unguided(model, scenes):
    a = generate(model, scenes, "agent", 3, seed=1)
    b = generate(model, scenes, "agent", 3, seed=1, goals={})
    assert np.array_equal(a.states, b.states) and b.guidance_calls == 0


def _goal(sc, agent, dx=3.0):
    p = sc.future[agent, -1, :2]
    th = sc.future[agent, -1, 2]
    return (float(p[0] - dx * np.sin(th)), float(p[1] + dx * np.cos(th)))


def test_guided_run_counts_and_masks(model, scenes):
    goals = {0: {scenes[0].ego: _goal(scenes[0], scenes[0].ego)}}
    res = generate(model, scenes, "agent", 5, goals=goals)
    plain = generate(model, scenes, "agent", 5)
    assert res.denoiser_calls == 5 and res.guidance_calls == 5
    target = scenes[0].ego
    for fed, base in zip(res.masks, plain.masks):
        others = [i for i in range(fed.shape[1]) if i != target]
        assert np.array_equal(fed[0, others], base[0, others])
        assert np.array_equal(fed[1:], base[1:])
        # the target is never cleaner than the guidance level
        assert np.all(model.alphas.alpha(fed[0, target]) <= 0.8)


def test_guided_target_ends_on_goal(model, scenes):
    sc = scenes[0]
    goal = _goal(sc, sc.ego)
    res = generate(model, scenes, "agent", 2, goals={0: {sc.ego: goal}})
    end = res.states[0, 0, sc.ego, -1, :2]
    assert np.hypot(end[0] - goal[0], end[1] - goal[1]) < 0.2


def test_goal_objective_identity_without_goals(model, scenes):
    b = _featurize(model, scenes)
    x = np.random.default_rng(0).normal(size=b.gt_actions.shape)
    assert np.array_equal(goal_objective(x, b, {}, SMALL), x)
    g = local_goals(b, {1: {0: tuple(scenes[1].current[0, :2] + [20.0, 1.0])}})
    out = goal_objective(x, b, g, SMALL)
    assert np.array_equal(np.delete(out[1], 0, axis=0), np.delete(x[1], 0, axis=0))
    assert np.array_equal(out[0], x[0])
    end = rollout(b.init_local()[1, 0], out[1, 0]).data[-1, :2]
    assert np.hypot(*(end - g[(1, 0)])) < 0.2


def test_goal_sanity(model, scenes):
    b = _featurize(model, scenes)
    with pytest.raises(ContractError):
        local_goals(b, {0: {0: (1e6, 0.0)}})
    n = scenes[0].n_agents
    if n < b.n_agents:
        with pytest.raises(ContractError):
            local_goals(b, {0: {b.n_agents - 1: (0.0, 0.0)}})


def test_explicit_schedule(model, scenes):
    sc = scenes[:1]
    sched = build_schedule("temporal", 4, sc[0].n_agents, 20, SMALL.K)
    a = generate(model, sc, schedule=sched, seed=3)
    b = generate(model, sc, "temporal", 4, seed=3)
    assert np.array_equal(a.states, b.states)
    with pytest.raises(ContractError):
        generate(model, sc, schedule=build_schedule("temporal", 4, sc[0].n_agents + 1, 20, SMALL.K))


def test_shift_actions():
    a = np.arange(10.0).reshape(5, 2)
    out = shift_actions(a, 2)
    assert np.array_equal(out[:3], a[2:])
    assert np.array_equal(out[3:], [a[-1], a[-1]])
    assert np.array_equal(shift_actions(a, 0), a)
    with pytest.raises(ContractError):
        shift_actions(a, 5)


def test_constant_velocity(scenes):
    sc = scenes[0]
    cv = constant_velocity([sc], 40)[0]
    cur = sc.current
    d = np.hypot(*(cv[:, -1, :2] - cur[:, :2]).T)
    assert np.allclose(d, np.hypot(cur[:, 3], cur[:, 4]) * 4.0)


def test_episode_accounting(model, scenes):
    ep = run_episode(model, scenes[0], reuse=True, seed=1)
    assert ep.denoiser_calls == 8 and len(ep.plans) == 8
    assert ep.executed.shape == (scenes[0].n_agents, 80, 5)
    assert [t0 for t0, _ in ep.plans] == list(range(0, 80, 10))
    again = run_episode(model, scenes[0], reuse=True, seed=1)
    assert np.array_equal(ep.executed, again.executed)


def test_executed_segments_follow_plans(model, scenes):
    ep = run_episode(model, scenes[1], reuse=False, seed=0, duration=3.0)
    for k, (t0, plan) in enumerate(ep.plans):
        assert np.array_equal(ep.executed[:, t0:t0 + 10], plan[:, :10])


def test_replan_period_must_divide_horizon(model, scenes):
    with pytest.raises(ContractError):
        run_episode(model, scenes[0], reuse=False, replan_hz=1.0 / 3.0)


def test_agent_count_drift_falls_back(model, scenes):
    sc = scenes[0]
    stale = np.zeros((sc.n_agents + 2, 20, 2))
    world = sc.replace(future=np.zeros((sc.n_agents, 0, 5)))
    a, calls = closed_loop_step(model, world, stale, 5, np.random.default_rng(0))
    b, _ = closed_loop_step(model, world, None, 5, np.random.default_rng(0))
    assert calls == 1 and np.array_equal(a, b)


def test_trace_round_trip(tmp_path):
    st = np.random.default_rng(0).normal(size=(2, 3, 5))
    path = tmp_path / "t.csv"
    path.write_text(trace_header({"seed": 4, "mode": "agent"}) + trace_rows(0, 1, 0, st, t0=10))
    meta, rec = read_trace(path)
    assert meta == {"mode": "agent", "seed": "4"}
    assert len(rec) == 6 and rec["t"].tolist() == [10, 11, 12] * 2
    assert np.array_equal(rec["x"].reshape(2, 3), st[..., 0])
