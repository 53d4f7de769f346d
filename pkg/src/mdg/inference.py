"""Masked-denoising generation, goal guidance and closed-loop replanning."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from mdg.autodiff import no_grad
from mdg.errors import ContractError
from mdg.features import Batch, featurize
from mdg.kinematics import fit_positions, rollout, signed_speed, to_global, to_local
from mdg.model import MDGModel
from mdg.noisefield import (
    InferenceSchedule, apply_noise, build_schedule, check_schedule, compose_guidance, guidance_mask,
)
from mdg.synthworld.scenario import Scenario

GOAL_SANITY_RADIUS = 500.0


@dataclass
class GenerationResult:
    actions: np.ndarray          # (B, S, N, T_a, 2) normalised, agent frames
    states: np.ndarray           # (B, S, N, T, 5) global frame
    local_states: np.ndarray     # (B, S, N, T, 5) agent frames
    denoiser_calls: int
    guidance_calls: int = 0
    masks: list = field(default_factory=list)     # masks fed to the denoiser, per step (B, N, T_a)
    n_agents: list = field(default_factory=list)


def _featurize(model: MDGModel, scenarios: list[Scenario]) -> Batch:
    c = model.cfg
    return featurize(scenarios, c.max_map, c.n_routes, c.horizon, c.chunk)


def _stack_schedules(mode: str, steps: int, batch: Batch, n_real: list[int], K: int) -> list[np.ndarray]:
    B, N = batch.agent_valid.shape
    Ta = batch.gt_actions.shape[2]
    per_scene = []
    for n in n_real:
        sch = build_schedule(mode, steps, n, Ta, K)
        per_scene.append(sch.masks)
    masks = []
    for i in range(steps + 1):
        m = np.zeros((B, N, Ta), dtype=np.int64)
        for b, n in enumerate(n_real):
            m[b, :n] = per_scene[b][i]
        masks.append(m)
    return masks


def local_goals(batch: Batch, goals: dict[int, dict[int, tuple[float, float]]]) -> dict:
    """Global goal points -> agent-frame points, keyed (scene, agent)."""
    out = {}
    for b, per in goals.items():
        for a, g in per.items():
            if not batch.agent_valid[b, a]:
                raise ContractError(f"guidance target {a} is not a valid agent of scene {b}")
            anchor = batch.agent_anchor[b, a]
            if np.hypot(g[0] - anchor[0], g[1] - anchor[1]) > GOAL_SANITY_RADIUS:
                raise ContractError(f"goal for agent {a} lies more than {GOAL_SANITY_RADIUS:.0f} m away")
            out[(b, a)] = to_local(np.array([g[0], g[1], 0.0]), anchor)[:2]
    return out


def goal_objective(x_hat: np.ndarray, batch: Batch, goals_local: dict, cfg) -> np.ndarray:
    """Re-aim each target's trajectory so it ends on its goal.

    The rolled-out positions are shifted by an offset ramping linearly from
    zero to the full endpoint error, then re-fit to actions.
    """
    out = x_hat.copy()
    if not goals_local:
        return out
    init = batch.init_local()
    for (b, a), g in sorted(goals_local.items()):
        st = rollout(init[b, a], x_hat[b, a], cfg.dt, cfg.chunk).data
        T = st.shape[0]
        ramp = np.arange(1, T + 1) / T
        xy = st[:, :2] + ramp[:, None] * (g - st[-1, :2])
        out[b, a] = fit_positions(xy, init[b, a], cfg.dt, cfg.chunk)
    return out


def generate(model: MDGModel, scenarios: list[Scenario], mode: str = "one_step", steps: int = 1,
             num_samples: int = 1, seed: int = 0, goals: dict | None = None,
             schedule: InferenceSchedule | None = None, batch: Batch | None = None) -> GenerationResult:
    """Sample futures for every scenario.

    ``goals`` maps scene index -> {agent: (x, y)} in world coordinates and
    switches on guidance. Sample s of scene b draws from the stream
    (seed, scenario_id, s).
    """
    cfg = model.cfg
    batch = batch if batch is not None else _featurize(model, scenarios)
    B, N = batch.agent_valid.shape
    Ta = cfg.action_steps
    n_real = [s.n_agents for s in scenarios]
    if schedule is not None:
        check_schedule(schedule, model.alphas)
        masks = [np.broadcast_to(m[None], (B,) + m.shape).copy() for m in schedule.masks]
        if masks[0].shape[1:] != (N, Ta):
            raise ContractError(f"schedule dims {masks[0].shape[1:]} do not match scene ({N}, {Ta})")
        steps = schedule.steps
    else:
        masks = _stack_schedules(mode, steps, batch, n_real, cfg.K)
    g = None
    goals_local = {}
    if goals:
        goals_local = local_goals(batch, goals)
        g = np.zeros((B, N, Ta), dtype=np.int64)
        for b in range(B):
            targets = [a for (bb, a) in goals_local if bb == b]
            g[b] = guidance_mask(N, Ta, targets, cfg.K)
    actions = np.empty((B, num_samples, N, Ta, 2))
    fed = []
    calls = 0
    j_calls = 0
    with no_grad():
        enc = model.encode(batch)
        for s in range(num_samples):
            rngs = [np.random.default_rng([seed, sc.scenario_id, s]) for sc in scenarios]
            z = np.stack([r.standard_normal((N, Ta, 2)) for r in rngs])
            x_hat = z
            for i in range(steps):
                m_cur = masks[i] if g is None else compose_guidance(masks[i], g, model.alphas)
                if s == 0:
                    fed.append(m_cur)
                x_hat = model.denoise(enc, batch, z, m_cur).data
                calls += 1
                if g is not None:
                    x_hat = goal_objective(x_hat, batch, goals_local, cfg)
                    j_calls += 1
                if i + 1 < steps:
                    m_next = masks[i + 1] if g is None else compose_guidance(masks[i + 1], g, model.alphas)
                    z = np.stack([apply_noise(x_hat[b], m_next[b], model.alphas, rngs[b])[0] for b in range(B)])
            actions[:, s] = x_hat
    init = batch.init_local()[:, None]
    local = rollout(np.broadcast_to(init, (B, num_samples, N, 4)), actions, cfg.dt, cfg.chunk).data
    world = to_global(local, batch.agent_anchor[:, None, :, None, :])
    return GenerationResult(actions, world, local, calls, j_calls, fed, n_real)


def constant_velocity(scenarios: list[Scenario], horizon: int) -> list[np.ndarray]:
    """Per scenario (N, T, 5): hold each agent's current heading and signed speed."""
    out = []
    for sc in scenarios:
        cur = sc.current
        v = signed_speed(cur)
        t = np.arange(1, horizon + 1) * sc.dt
        st = np.empty((sc.n_agents, horizon, 5))
        st[..., 0] = cur[:, None, 0] + v[:, None] * np.cos(cur[:, None, 2]) * t
        st[..., 1] = cur[:, None, 1] + v[:, None] * np.sin(cur[:, None, 2]) * t
        st[..., 2] = cur[:, None, 2]
        st[..., 3] = cur[:, None, 3]
        st[..., 4] = cur[:, None, 4]
        out.append(st)
    return out


# ---------------------------------------------------------------------------
# closed loop
# ---------------------------------------------------------------------------

@dataclass
class Episode:
    scenario_id: int
    executed: np.ndarray                 # (N, steps, 5) world frame
    plans: list                          # per replan: (start step, (N, T, 5) world-frame plan)
    denoiser_calls: int
    ego: int

    def ego_plans(self) -> list[tuple[int, np.ndarray]]:
        return [(t0, p[self.ego, :, :2]) for t0, p in self.plans]


def shift_actions(prev: np.ndarray, elapsed: int) -> np.ndarray:
    """Drop ``elapsed`` leading action steps and repeat the final action to refill the horizon."""
    if not 0 <= elapsed < prev.shape[-2]:
        raise ContractError("elapsed steps must be smaller than the plan length")
    tail = np.repeat(prev[..., -1:, :], elapsed, axis=-2)
    return np.concatenate([prev[..., elapsed:, :], tail], axis=-2)


def closed_loop_step(model: MDGModel, world: Scenario, prev_actions: np.ndarray | None, elapsed: int,
                     rng: np.random.Generator) -> tuple[np.ndarray, int]:
    """New plan actions (N, T_a, 2) for every agent and the number of denoiser calls.

    Without a previous plan this is one-step generation from pure noise;
    with one, the shifted plan is perturbed at level 1 and denoised once
    under an all-level-1 mask.
    """
    cfg = model.cfg
    batch = _featurize(model, [world])
    N = world.n_agents
    Ta = cfg.action_steps
    with no_grad():
        enc = model.encode(batch)
        if prev_actions is None:
            z = rng.standard_normal((1, N, Ta, 2))
            m = np.full((1, N, Ta), cfg.K, dtype=np.int64)
        else:
            if prev_actions.shape[0] != N:
                # agent count drifted: plan afresh on the re-tokenised world
                return closed_loop_step(model, world, None, elapsed, rng)
            m = np.ones((1, N, Ta), dtype=np.int64)
            z = apply_noise(shift_actions(prev_actions, elapsed)[None], m, model.alphas, rng)[0]
        x_hat = model.denoise(enc, batch, z, m).data[0]
    return x_hat, 1


def run_episode(model: MDGModel, scenario: Scenario, reuse: bool, seed: int = 0,
                duration: float = 8.0, replan_hz: float = 1.0) -> Episode:
    """Drive every agent with its own plan, replanning at ``replan_hz`` for ``duration`` seconds."""
    cfg = model.cfg
    period = int(round(1.0 / (replan_hz * scenario.dt)))
    if period <= 0 or period % cfg.chunk or cfg.horizon % period:
        raise ContractError(f"replan period of {period} steps must be a multiple of the chunk and divide the horizon")
    n_replans = int(round(duration * replan_hz))
    H = scenario.history.shape[1]
    world = scenario.replace(future=np.zeros((scenario.n_agents, 0, 5)))
    executed = []
    plans = []
    prev = None
    calls = 0
    for k in range(n_replans):
        rng = np.random.default_rng([seed, scenario.scenario_id, k])
        acts, c = closed_loop_step(model, world, prev if reuse else None, period // cfg.chunk, rng)
        calls += c
        cur = world.current
        init = np.stack([np.zeros(len(cur)), np.zeros(len(cur)), np.zeros(len(cur)), signed_speed(cur)], axis=-1)
        local = rollout(init, acts, cfg.dt, cfg.chunk).data
        plan = to_global(local, cur[:, None, :3])
        plans.append((k * period, plan))
        seg = plan[:, :period]
        executed.append(seg)
        hist = np.concatenate([world.history, seg], axis=1)[:, -H:]
        world = world.replace(history=hist)
        prev = acts
    return Episode(scenario.scenario_id, np.concatenate(executed, axis=1), plans, calls, scenario.ego)


# ---------------------------------------------------------------------------
# traces
# ---------------------------------------------------------------------------

TRACE_COLUMNS = "episode,replan,sample,agent,t,x,y,theta,vx,vy"


def trace_header(meta: dict) -> str:
    return "".join(f"# {k}={meta[k]}\n" for k in sorted(meta)) + TRACE_COLUMNS + "\n"


def trace_rows(episode: int, replan: int, sample: int, states: np.ndarray, t0: int = 0) -> str:
    """Rows for one (N, T, 5) state block."""
    lines = []
    for a in range(states.shape[0]):
        for t in range(states.shape[1]):
            x, y, th, vx, vy = (float(v) for v in states[a, t])
            lines.append(f"{episode},{replan},{sample},{a},{t0 + t},{x!r},{y!r},{th!r},{vx!r},{vy!r}\n")
    return "".join(lines)


def read_trace(path) -> tuple[dict, np.ndarray]:
    """Header dict and a structured array of trace records."""
    meta = {}
    rows = []
    with open(path) as fh:
        for ln in fh:
            if ln.startswith("#"):
                k, _, v = ln[1:].strip().partition("=")
                meta[k] = v
            elif ln.startswith("episode"):
                continue
            elif ln.strip():
                rows.append(tuple(ln.rstrip("\n").split(",")))
    dt = np.dtype([("episode", "i8"), ("replan", "i8"), ("sample", "i8"), ("agent", "i8"), ("t", "i8"),
                   ("x", "f8"), ("y", "f8"), ("theta", "f8"), ("vx", "f8"), ("vy", "f8")])
    arr = np.array([tuple(int(v) if i < 5 else float(v) for i, v in enumerate(r)) for r in rows], dtype=dt)
    return meta, arr
