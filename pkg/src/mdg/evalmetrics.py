"""Scene-level evaluation metrics: CR, OR, SADE, minSADE, GR and plan consistency.

Conventions: trajectories are (samples, agents, T, >=3) in a shared world
frame; ``modeled`` flags select the agents that enter metric sums. Goal
reach uses a strict ``< 1 m`` threshold and scenes without targets are left
out of its average.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from mdg import kernels
from mdg.errors import ContractError
from mdg.synthworld.maps import LANE_WIDTH
from mdg.synthworld.scenario import PEDESTRIAN

GOAL_RADIUS = 1.0


@dataclass
class SceneEval:
    """One scene's predictions and references.

    traj (S, N, T, 3+) predicted poses; gt (N, T, 3+); extents (N, 2);
    lanes (L, W, 2+) drivable centerlines; goals maps target agent -> (x, y).
    """
    traj: np.ndarray
    gt: np.ndarray
    extents: np.ndarray
    modeled: np.ndarray
    types: np.ndarray | None = None
    lanes: np.ndarray | None = None
    goals: dict = field(default_factory=dict)

    def __post_init__(self):
        self.traj = np.asarray(self.traj, dtype=np.float64)
        if self.traj.ndim != 4:
            raise ContractError("traj must be (samples, agents, T, channels)")
        self.modeled = np.asarray(self.modeled, dtype=bool)
        if self.types is None:
            self.types = np.zeros(self.traj.shape[1], dtype=np.int64)


def _check_uniform(scenes: list[SceneEval]) -> None:
    if len({s.traj.shape[0] for s in scenes}) > 1:
        raise ContractError("sample count must be uniform across scenes")


# ---------------------------------------------------------------------------
# collisions
# ---------------------------------------------------------------------------

def collision_flags(traj: np.ndarray, extents: np.ndarray) -> np.ndarray:
    """(S, N) flags: agent overlaps any other agent at any step."""
    traj = np.asarray(traj, dtype=np.float64)
    extents = np.asarray(extents, dtype=np.float64)
    if np.any(extents <= 0):
        raise ContractError("extents must be positive")
    S, N, T = traj.shape[:3]
    poses = traj[..., :3].transpose(0, 2, 1, 3).reshape(S * T, N, 3)
    boxes = np.concatenate([poses, np.broadcast_to(extents, (S * T, N, 2))], axis=-1)
    hit = kernels.obb_overlap_frames(boxes).any(axis=-1).reshape(S, T, N)
    return hit.any(axis=1)


def collision_rate(scenes: list[SceneEval]) -> float:
    _check_uniform(scenes)
    rates = []
    for s in scenes:
        if not s.modeled.any():
            continue
        rates.append(collision_flags(s.traj, s.extents)[:, s.modeled].mean())
    return float(np.mean(rates)) if rates else 0.0


def point_sampling_overlap(a: np.ndarray, b: np.ndarray, spacing: float = 0.05) -> bool:
    """Brute-force oracle: sample a grid over box ``a`` and test membership in ``b``.

    Boxes are (x, y, theta, length, width).
    """
    nx = max(2, int(np.ceil(a[3] / spacing)) + 1)
    ny = max(2, int(np.ceil(a[4] / spacing)) + 1)
    u, v = np.meshgrid(np.linspace(-a[3] / 2, a[3] / 2, nx), np.linspace(-a[4] / 2, a[4] / 2, ny))
    ca, sa = np.cos(a[2]), np.sin(a[2])
    px = a[0] + ca * u - sa * v
    py = a[1] + sa * u + ca * v
    cb, sb = np.cos(b[2]), np.sin(b[2])
    dx, dy = px - b[0], py - b[1]
    lu = cb * dx + sb * dy
    lv = -sb * dx + cb * dy
    return bool(np.any((np.abs(lu) < b[3] / 2) & (np.abs(lv) < b[4] / 2)))


# ---------------------------------------------------------------------------
# off-road
# ---------------------------------------------------------------------------

def distance_to_lanes(points: np.ndarray, lanes: np.ndarray) -> np.ndarray:
    """Distance of points (..., 2) to the nearest centerline segment."""
    a = lanes[:, :-1, :2].reshape(-1, 2)
    d = lanes[:, 1:, :2].reshape(-1, 2) - a
    p = np.asarray(points, dtype=np.float64)[..., None, :]
    len2 = np.maximum((d * d).sum(-1), 1e-12)
    t = np.clip(((p - a) * d).sum(-1) / len2, 0.0, 1.0)
    closest = a + t[..., None] * d
    return np.sqrt(((p - closest) ** 2).sum(-1)).min(axis=-1)


def on_road(points: np.ndarray, lanes: np.ndarray, half_width: float = LANE_WIDTH / 2) -> np.ndarray:
    return distance_to_lanes(points, lanes) <= half_width


def offroad_rate(scenes: list[SceneEval]) -> float:
    _check_uniform(scenes)
    rates = []
    for s in scenes:
        if s.lanes is None or len(s.lanes) == 0:
            raise ContractError("off-road rate needs a drivable area")
        eligible = s.modeled & (s.types != PEDESTRIAN)
        start_ok = on_road(s.traj[:, :, 0, :2], s.lanes)           # (S, N)
        inside = on_road(s.traj[..., :2], s.lanes)                  # (S, N, T)
        counted = eligible[None, :] & start_ok
        if not counted.any():
            continue
        off = (~inside).any(axis=-1)
        rates.append(float(off[counted].sum() / counted.sum()))
    return float(np.mean(rates)) if rates else 0.0


# ---------------------------------------------------------------------------
# displacement
# ---------------------------------------------------------------------------

def _sample_ade(s: SceneEval) -> np.ndarray:
    gt = np.asarray(s.gt, dtype=np.float64)
    if s.traj.shape[1:3] != gt.shape[:2]:
        raise ContractError(f"trajectory shape {s.traj.shape[1:3]} does not match ground truth {gt.shape[:2]}")
    err = np.hypot(s.traj[..., 0] - gt[..., 0], s.traj[..., 1] - gt[..., 1])   # (S, N, T)
    return err[:, s.modeled].mean(axis=(1, 2))


def sade(scenes: list[SceneEval]) -> float:
    _check_uniform(scenes)
    return float(np.mean([_sample_ade(s).mean() for s in scenes if s.modeled.any()]))


def minsade(scenes: list[SceneEval]) -> float:
    _check_uniform(scenes)
    return float(np.mean([_sample_ade(s).min() for s in scenes if s.modeled.any()]))


# ---------------------------------------------------------------------------
# goals and plans
# ---------------------------------------------------------------------------

def goal_reach_rate(scenes: list[SceneEval]) -> float:
    """Fraction of target agents (over samples) ending strictly within 1 m of their goal."""
    rates = []
    for s in scenes:
        if not s.goals:
            continue
        hits = []
        for agent, goal in sorted(s.goals.items()):
            end = s.traj[:, agent, -1, :2]
            hits.append(np.hypot(end[:, 0] - goal[0], end[:, 1] - goal[1]) < GOAL_RADIUS)
        rates.append(float(np.mean(hits)))
    return float(np.mean(rates)) if rates else float("nan")


def plan_consistency(plans: list[tuple[int, np.ndarray]]) -> float:
    """Mean L2 between time-aligned overlaps of successive plans.

    ``plans`` holds (start step, positions (T, 2)) in replan order; each pair
    contributes the mean distance over its overlapping steps.
    """
    if len(plans) < 2:
        raise ContractError("plan consistency needs at least two plans")
    vals = []
    for (t0, p0), (t1, p1) in zip(plans[:-1], plans[1:]):
        lo, hi = t1, min(t0 + len(p0), t1 + len(p1))
        if hi <= lo:
            continue
        a = np.asarray(p0)[lo - t0:hi - t0, :2]
        b = np.asarray(p1)[lo - t1:hi - t1, :2]
        vals.append(np.hypot(*(a - b).T).mean())
    if not vals:
        raise ContractError("successive plans do not overlap in time")
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

METRICS = ("CR", "OR", "SADE", "minSADE", "GR")


def evaluate(scenes: list[SceneEval], metrics=METRICS) -> dict[str, tuple[float, int]]:
    fns = {"CR": collision_rate, "OR": offroad_rate, "SADE": sade, "minSADE": minsade, "GR": goal_reach_rate}
    out = {}
    for name in metrics:
        if name not in fns:
            raise ContractError(f"unknown metric {name!r}; valid: {', '.join(METRICS)}")
        count = len([s for s in scenes if s.goals]) if name == "GR" else len(scenes)
        out[name] = (fns[name](scenes), count)
    return out


def format_table(report: dict[str, tuple[float, int]]) -> str:
    lines = [f"{'metric':<10}{'value':>12}{'count':>8}"]
    lines += [f"{k:<10}{v:>12.6f}{n:>8d}" for k, (v, n) in report.items()]
    return "\n".join(lines) + "\n"


def format_csv(report: dict[str, tuple[float, int]]) -> str:
    return "metric,value,count\n" + "".join(f"{k},{float(v)!r},{n}\n" for k, (v, n) in report.items())
