"""Scenario -> padded, local-frame batch arrays for the model.

Agents are anchored at their last observed state, polylines at their first
waypoint, lights at their stop point. Only anchors carry global pose; every
model input is relative, which is what makes the model invariant to rigid
transforms of the scene.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mdg.errors import ContractError
from mdg.kinematics import inverse_dynamics, signed_speed, to_local
from mdg.synthworld.scenario import Scenario

POS_SCALE = 10.0
N_PHASES = 4


@dataclass
class Batch:
    agent_hist: np.ndarray      # (B, N, H, 7)
    agent_valid: np.ndarray     # (B, N) bool
    agent_type: np.ndarray      # (B, N) int
    agent_anchor: np.ndarray    # (B, N, 3) global x, y, theta
    v0: np.ndarray              # (B, N) signed speed at the anchor
    extents: np.ndarray         # (B, N, 2)
    ego: np.ndarray             # (B,) int
    map_feat: np.ndarray        # (B, Nm, W, 3)
    map_valid: np.ndarray
    map_anchor: np.ndarray
    light_phase: np.ndarray     # (B, Ns) int
    light_valid: np.ndarray
    light_anchor: np.ndarray
    route_feat: np.ndarray      # (B, R, W, 3)
    route_valid: np.ndarray
    route_anchor: np.ndarray
    future_local: np.ndarray    # (B, N, T, 5) ground truth in agent frames (zeros when absent)
    future_valid: np.ndarray    # (B, N, T) bool
    gt_actions: np.ndarray      # (B, N, T_a, 2) normalised

    @property
    def size(self) -> int:
        return self.agent_hist.shape[0]

    @property
    def n_agents(self) -> int:
        return self.agent_hist.shape[1]

    def entity_anchor(self) -> np.ndarray:
        return np.concatenate([self.agent_anchor, self.map_anchor, self.light_anchor], axis=1)

    def entity_valid(self) -> np.ndarray:
        return np.concatenate([self.agent_valid, self.map_valid, self.light_valid], axis=1)

    def init_local(self) -> np.ndarray:
        """Rollout initial states in each agent's own frame."""
        z = np.zeros(self.v0.shape + (4,))
        z[..., 3] = self.v0
        return z


def select_map(sc: Scenario, max_map: int) -> np.ndarray:
    """Indices of the ``max_map`` polylines nearest the ego, in map order."""
    polys = sc.map_polylines
    if len(polys) <= max_map:
        return np.arange(len(polys))
    ego = sc.current[sc.ego, :2]
    d = np.sqrt(((polys[..., :2] - ego) ** 2).sum(-1)).min(axis=1)
    order = np.lexsort((np.arange(len(polys)), d))
    return np.sort(order[:max_map])


def _poly_local(polys: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    anchor = polys[:, 0, :3]
    local = to_local(polys, anchor[:, None, :])
    local[..., :2] /= POS_SCALE
    return local, anchor


def featurize(scenarios: list[Scenario], max_map: int = 32, n_routes: int = 4,
              horizon: int | None = None, chunk: int = 2) -> Batch:
    if not scenarios:
        raise ContractError("empty batch")
    B = len(scenarios)
    N = max(s.n_agents for s in scenarios)
    H = scenarios[0].history.shape[1]
    T = horizon if horizon is not None else scenarios[0].future.shape[1]
    W = scenarios[0].map_polylines.shape[1] if len(scenarios[0].map_polylines) else 16
    maps = [select_map(s, max_map) for s in scenarios]
    Nm = max(1, max(len(m) for m in maps))
    Ns = max(1, max(len(s.lights) for s in scenarios))
    R = max(1, min(n_routes, max(len(s.routes) for s in scenarios)))

    out = dict(
        agent_hist=np.zeros((B, N, H, 7)), agent_valid=np.zeros((B, N), bool),
        agent_type=np.zeros((B, N), np.int64), agent_anchor=np.zeros((B, N, 3)),
        v0=np.zeros((B, N)), extents=np.ones((B, N, 2)), ego=np.zeros(B, np.int64),
        map_feat=np.zeros((B, Nm, W, 3)), map_valid=np.zeros((B, Nm), bool), map_anchor=np.zeros((B, Nm, 3)),
        light_phase=np.zeros((B, Ns), np.int64), light_valid=np.zeros((B, Ns), bool), light_anchor=np.zeros((B, Ns, 3)),
        route_feat=np.zeros((B, R, W, 3)), route_valid=np.zeros((B, R), bool), route_anchor=np.zeros((B, R, 3)),
        future_local=np.zeros((B, N, T, 5)), future_valid=np.zeros((B, N, T), bool),
        gt_actions=np.zeros((B, N, T // chunk, 2)),
    )
    for b, sc in enumerate(scenarios):
        n = sc.n_agents
        if sc.history.shape[1] != H:
            raise ContractError("all scenarios in a batch need the same history length")
        cur = sc.current
        anchor = cur[:, :3]
        hist = to_local(sc.history, anchor[:, None, :])
        hist[..., [0, 1, 3, 4]] /= POS_SCALE
        out["agent_hist"][b, :n, :, :5] = hist
        out["agent_hist"][b, :n, :, 5:] = sc.extents[:, None, :] / POS_SCALE
        out["agent_valid"][b, :n] = True
        out["agent_type"][b, :n] = sc.types
        out["agent_anchor"][b, :n] = anchor
        out["v0"][b, :n] = signed_speed(cur)
        out["extents"][b, :n] = sc.extents
        out["ego"][b] = sc.ego
        if len(maps[b]):
            loc, anc = _poly_local(sc.map_polylines[maps[b]])
            out["map_feat"][b, :len(loc)] = loc
            out["map_anchor"][b, :len(loc)] = anc
            out["map_valid"][b, :len(loc)] = True
        ns = len(sc.lights)
        if ns:
            out["light_phase"][b, :ns] = sc.lights[:, 0].astype(np.int64)
            out["light_anchor"][b, :ns] = sc.lights[:, 1:4]
            out["light_valid"][b, :ns] = True
        nr = min(R, len(sc.routes))
        if nr:
            loc, anc = _poly_local(sc.routes[:nr])
            out["route_feat"][b, :nr] = loc
            out["route_anchor"][b, :nr] = anc
            out["route_valid"][b, :nr] = True
        if sc.future.shape[1] >= T and T > 0:
            fut = to_local(sc.future[:, :T], anchor[:, None, :])
            out["future_local"][b, :n] = fut
            out["future_valid"][b, :n] = True
            init = np.zeros((n, 4))
            init[:, 3] = out["v0"][b, :n]
            out["gt_actions"][b, :n] = inverse_dynamics(fut, init, sc.dt, chunk)
    return Batch(**out)
