"""Rule-based drivers and walkers that produce ground-truth scenarios.

Vehicles track their lane with pure pursuit and pick the most conservative of
a free-road speed controller, a gap-proportional follower for anything in
their corridor, and a stop-line target for red or yellow lights. Everything
is integrated with the same unicycle the model uses.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mdg import kernels
from mdg.errors import ContractError
from mdg.synthworld.maps import GREEN, KINDS, RoadMap, drivable_lanes, generate_map
from mdg.synthworld.scenario import PEDESTRIAN, VEHICLE, Scenario

DT = 0.1
H_DEFAULT = 10
T_DEFAULT = 40
V_CAP = 12.0
A_MAX = 3.0
YAW_MAX = 1.0
GAP_MIN = 2.0
HEADWAY = 1.0
K_GAP = 0.3
K_REL = 0.8
MAX_ATTEMPTS = 20


@dataclass
class AgentSpec:
    lane: int                # -1 for walkers
    x: float
    y: float
    theta: float
    v: float
    length: float
    width: float
    kind: int = VEHICLE
    v_des: float = V_CAP


def _corridor_leaders(lane, me: int, pos, v, length, width):
    """(gap, leader speed) of the nearest agent ahead inside the lane corridor."""
    s_all, lat_all = lane.project(pos)
    s_me = s_all[me]
    ds = s_all - s_me
    near = (ds > 0.0) & (ds < 60.0) & (np.abs(lat_all) < 0.5 * (width[me] + width) + 0.8)
    near[me] = False
    if not near.any():
        return None
    j = np.flatnonzero(near)[np.argmin(ds[near])]
    return ds[j] - 0.5 * (length[me] + length[j]), v[j]


def _follow_accel(gap: float, v: float, v_lead: float, s0: float) -> float:
    a = K_GAP * (gap - s0 - v * HEADWAY) + K_REL * (v_lead - v)
    if v > v_lead and gap > s0:
        need = (v * v - v_lead * v_lead) / (2.0 * max(gap - s0, 1e-3))
        if need > 1.0:
            a = min(a, -need)
    elif gap <= s0:
        a = min(a, -A_MAX)
    return a


def controls(rm: RoadMap, specs: list[AgentSpec], state: np.ndarray) -> np.ndarray:
    """Per-agent (accel, yaw rate) for the current state rows (x, y, theta, v)."""
    n = len(specs)
    out = np.zeros((n, 2))
    pos = state[:, :2]
    v = state[:, 3]
    length = np.array([s.length for s in specs])
    width = np.array([s.width for s in specs])
    for i, sp in enumerate(specs):
        if sp.kind == PEDESTRIAN:
            continue
        lane = rm.lanes[sp.lane]
        s_me, _ = lane.project(pos[i])
        lookahead = 4.0 + 0.6 * max(v[i], 0.0)
        tx, ty, _ = lane.pose_at(s_me + lookahead)
        alpha = np.arctan2(ty - pos[i, 1], tx - pos[i, 0]) - state[i, 2]
        alpha = np.mod(alpha + np.pi, 2 * np.pi) - np.pi
        out[i, 1] = np.clip(v[i] * 2.0 * np.sin(alpha) / lookahead, -YAW_MAX, YAW_MAX)

        a = 0.6 * (sp.v_des - v[i])
        lead = _corridor_leaders(lane, i, pos, v, length, width)
        if lead is not None:
            a = min(a, _follow_accel(lead[0], v[i], lead[1], GAP_MIN))
        for lt in rm.lights:
            if lt.lane != sp.lane or lt.phase == GREEN:
                continue
            to_line = lt.s_stop - s_me - 0.5 * sp.length
            if to_line > -0.5:
                a = min(a, _follow_accel(to_line, v[i], 0.0, 0.5))
        a = float(np.clip(a, -A_MAX, A_MAX))
        a = max(a, -v[i] / DT)
        a = min(a, (V_CAP - v[i]) / DT)
        out[i, 0] = a
    return out


def simulate(rm: RoadMap, specs: list[AgentSpec], steps: int) -> np.ndarray:
    """States (n, steps, 5) as (x, y, theta, vx, vy); row 0 is the spawn state."""
    n = len(specs)
    state = np.array([[s.x, s.y, s.theta, s.v] for s in specs], dtype=np.float64)
    traj = np.empty((n, steps, 4))
    traj[:, 0] = state
    for k in range(1, steps):
        u = controls(rm, specs, state)
        state = kernels.rollout_forward(state, u[:, None, :], DT, 1)[:, 0, :]
        traj[:, k] = state
    out = np.empty((n, steps, 5))
    out[..., :3] = traj[..., :3]
    out[..., 3] = traj[..., 3] * np.cos(traj[..., 2])
    out[..., 4] = traj[..., 3] * np.sin(traj[..., 2])
    return out


def trajectories_collide(traj: np.ndarray, extents: np.ndarray) -> bool:
    """Brute-force check: any pair of boxes overlapping at any step."""
    boxes = np.concatenate([
        traj[..., :3].transpose(1, 0, 2),
        np.broadcast_to(extents[None], (traj.shape[1],) + extents.shape),
    ], axis=-1)
    return bool(kernels.obb_overlap_frames(boxes).any())


def _spawn(rm: RoadMap, n_agents: int, rng: np.random.Generator) -> list[AgentSpec]:
    specs: list[AgentSpec] = []
    n_walkers = 0
    if rm.kind == "intersection" and n_agents >= 3 and rng.random() < 0.5:
        n_walkers = 1
    lanes = drivable_lanes(rm)
    window = {"straight": (10.0, 140.0), "curve": (5.0, 80.0), "intersection": (5.0, 70.0), "merge": (5.0, 110.0)}[rm.kind]
    taken: dict[int, list[float]] = {i: [] for i in lanes}
    tries = 0
    while len(specs) < n_agents - n_walkers and tries < 400:
        tries += 1
        li = int(rng.choice(lanes))
        s = float(rng.uniform(*window))
        if any(abs(s - t) < 12.0 for t in taken[li]):
            continue
        lane = rm.lanes[li]
        x, y, th = lane.pose_at(s)
        v = float(rng.uniform(2.0, V_CAP))
        length = float(rng.uniform(4.2, 4.8))
        blocked = False
        for lt in rm.lights:
            if lt.lane == li and lt.phase != GREEN:
                room = lt.s_stop - s - 0.5 * length - 0.5
                if room < 1.0:
                    blocked = True
                else:
                    v = min(v, float(np.sqrt(2.0 * 1.5 * (room - 1.0))))
        if blocked:
            continue
        taken[li].append(s)
        width = float(rng.uniform(1.8, 2.0))
        specs.append(AgentSpec(li, float(x), float(y), float(th), v, length, width, VEHICLE, float(rng.uniform(8.0, V_CAP))))
    for _ in range(n_walkers):
        red = [lt for lt in rm.lights if lt.phase != GREEN]
        lt = red[int(rng.integers(len(red)))] if red else rm.lights[0]
        # crosswalk 4 m past the stop line, walking across the approach
        fwd = np.array([np.cos(lt.theta), np.sin(lt.theta)])
        left = np.array([-fwd[1], fwd[0]])
        side = 1.0 if rng.random() < 0.5 else -1.0
        p = np.array([lt.x, lt.y]) + 4.0 * fwd + side * 5.0 * left
        heading = float(np.arctan2(-side * left[1], -side * left[0]))
        specs.append(AgentSpec(-1, float(p[0]), float(p[1]), heading, float(rng.uniform(1.0, 1.5)), 0.6, 0.6, PEDESTRIAN, 0.0))
    return specs


def simulate_rule_agents(rm: RoadMap, n_agents: int, rng: np.random.Generator,
                         H: int = H_DEFAULT, T: int = T_DEFAULT, scenario_id: int = 0) -> Scenario:
    """Spawn, simulate and package a collision-free scenario.

    Spawns are resampled up to 20 times on collision, after which the agent
    count is reduced by one and sampling starts over.
    """
    if n_agents < 1:
        raise ContractError("need at least one agent")
    n = n_agents
    while n >= 1:
        for _ in range(MAX_ATTEMPTS):
            specs = _spawn(rm, n, rng)
            if len(specs) < n:
                continue
            traj = simulate(rm, specs, H + T)
            extents = np.array([[s.length, s.width] for s in specs])
            if trajectories_collide(traj, extents):
                continue
            vehicles = [i for i, s in enumerate(specs) if s.kind == VEHICLE]
            ego = int(vehicles[int(rng.integers(len(vehicles)))])
            routes = _route(rm, specs[ego], traj[ego, H - 1])
            return Scenario(
                scenario_id=scenario_id, kind=rm.kind, dt=DT, ego=ego,
                map_polylines=rm.polylines(), lights=rm.light_array(),
                history=traj[:, :H].copy(), future=traj[:, H:].copy(),
                types=np.array([s.kind for s in specs], dtype=np.int64),
                extents=extents, routes=routes,
            )
        n -= 1
    raise ContractError("could not place a single agent without collisions")


def _route(rm: RoadMap, spec: AgentSpec, current: np.ndarray, n_route: int = 4) -> np.ndarray:
    """Up to ``n_route`` polylines of the ego lane starting at the ego's current position."""
    from mdg.synthworld.maps import N_WAYPOINTS, split_polylines

    lane = rm.lanes[spec.lane]
    s_now, _ = lane.project(current[:2])
    k = int(np.searchsorted(lane.s, s_now, side="right") - 1)
    tail = lane.path[max(k, 0):]
    if len(tail) < N_WAYPOINTS:
        tail = lane.path[-N_WAYPOINTS:]
    return np.stack(split_polylines(tail)[:n_route])


def generate_scenarios(count: int, seed: int, kinds=KINDS, n_agents: int = 8,
                       H: int = H_DEFAULT, T: int = T_DEFAULT) -> list[Scenario]:
    """Scenario i draws everything from a stream keyed by (seed, i)."""
    for k in kinds:
        if k not in KINDS:
            raise ContractError(f"unknown map kind {k!r}; valid kinds: {', '.join(KINDS)}")
    out = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        kind = kinds[int(rng.integers(len(kinds)))]
        rm = generate_map(kind, rng)
        out.append(simulate_rule_agents(rm, n_agents, rng, H, T, scenario_id=i))
    return out
