"""Differentiable unicycle dynamics, inverse dynamics and action normalisation.

State channels are ``(x, y, theta, vx, vy)``; actions are ``(accel, yaw_rate)``
held constant over ``chunk`` integration sub-steps of ``dt`` seconds. Each
sub-step updates speed and heading first, then position with the updated
values.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mdg import kernels
from mdg.autodiff import Tensor, as_tensor, custom, wrap_angle_np
from mdg.errors import ContractError

DT = 0.1
CHUNK = 2
ACTION_MEAN = np.array([0.0, 0.0])
ACTION_STD = np.array([1.0, 0.5])


@dataclass
class AgentState:
    x: float
    y: float
    theta: float
    v: float
    length: float = 4.5
    width: float = 2.0

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta, self.v])


def normalize_actions(a):
    """Raw (accel m/s^2, yaw rate rad/s) -> normalised units."""
    if isinstance(a, Tensor):
        return (a - ACTION_MEAN) / ACTION_STD
    return (np.asarray(a, dtype=np.float64) - ACTION_MEAN) / ACTION_STD


def denormalize_actions(a):
    if isinstance(a, Tensor):
        return a * ACTION_STD + ACTION_MEAN
    return np.asarray(a, dtype=np.float64) * ACTION_STD + ACTION_MEAN


def _init_array(init) -> np.ndarray:
    if isinstance(init, Tensor):
        init = init.data
    if isinstance(init, AgentState):
        init = init.as_array()[None]
    arr = np.asarray(init, dtype=np.float64)
    if arr.shape[-1] != 4:
        raise ContractError(f"initial states need 4 channels (x, y, theta, v), got {arr.shape}")
    return arr


def rollout(init, actions, dt: float = DT, chunk: int = CHUNK, normalized: bool = True) -> Tensor:
    """Integrate actions from initial states.

    init: (..., 4) as (x, y, theta, v) or a Tensor of that shape.
    actions: (..., T_a, 2), normalised unless ``normalized=False``.
    Returns a Tensor (..., T_a*chunk, 5) of (x, y, theta, vx, vy), differentiable
    with respect to ``actions`` (and ``init`` when it is a Tensor needing grad).
    """
    if dt <= 0:
        raise ContractError("dt must be positive")
    act = as_tensor(actions)
    if act.shape[-1] != 2:
        raise ContractError(f"actions need 2 channels, got shape {act.shape}")
    if not np.all(np.isfinite(act.data)):
        raise ContractError("non-finite action")
    raw = denormalize_actions(act) if normalized else act
    init_t = init if isinstance(init, Tensor) else None
    init_arr = _init_array(init)
    lead = raw.shape[:-2]
    if init_arr.shape[:-1] != lead:
        raise ContractError(f"init batch shape {init_arr.shape[:-1]} does not match actions {lead}")
    ta = raw.shape[-2]
    flat_u = raw.data.reshape(-1, ta, 2)
    flat_init = init_arr.reshape(-1, 4)
    st = kernels.rollout_forward(flat_init, flat_u, float(dt), int(chunk))
    th, v = st[..., 2], st[..., 3]
    c, s = np.cos(th), np.sin(th)
    out = np.empty(st.shape[:-1] + (5,))
    out[..., 0] = st[..., 0]
    out[..., 1] = st[..., 1]
    out[..., 2] = th
    out[..., 3] = v * c
    out[..., 4] = v * s
    t_total = ta * chunk

    def backward(g):
        g = g.reshape(-1, t_total, 5)
        g4 = np.empty(st.shape)
        g4[..., 0] = g[..., 0]
        g4[..., 1] = g[..., 1]
        g4[..., 2] = g[..., 2] + v * (g[..., 4] * c - g[..., 3] * s)
        g4[..., 3] = g[..., 3] * c + g[..., 4] * s
        ga, gi = kernels.rollout_backward(st, g4, float(dt), int(chunk))
        return ga.reshape(raw.shape), (gi.reshape(init_arr.shape) if init_t is not None else None)

    parents = (raw,) if init_t is None else (raw, init_t)
    return custom(out.reshape(lead + (t_total, 5)), parents, backward, "rollout")


def signed_speed(states: np.ndarray) -> np.ndarray:
    """Speed along heading, negative when reversing."""
    th = states[..., 2]
    return states[..., 3] * np.cos(th) + states[..., 4] * np.sin(th)


def inverse_dynamics(states, init, dt: float = DT, chunk: int = CHUNK) -> np.ndarray:
    """Recover normalised chunked actions that reproduce ``states``.

    states: (..., T, 5); init: (..., 4). Per-step accel and yaw rate are
    finite differences of speed and wrapped heading, averaged within each chunk.
    """
    s = np.asarray(states.data if isinstance(states, Tensor) else states, dtype=np.float64)
    init_arr = _init_array(init)
    t_total = s.shape[-2]
    if t_total % chunk:
        raise ContractError(f"horizon {t_total} is not a multiple of chunk {chunk}")
    if not np.all(np.isfinite(s)):
        raise ContractError("non-finite state")
    th = np.concatenate([init_arr[..., None, 2], s[..., 2]], axis=-1)
    v = np.concatenate([init_arr[..., None, 3], signed_speed(s)], axis=-1)
    acc = np.diff(v, axis=-1) / dt
    yaw = wrap_angle_np(np.diff(th, axis=-1)) / dt
    per_step = np.stack([acc, yaw], axis=-1)
    chunked = per_step.reshape(per_step.shape[:-2] + (t_total // chunk, chunk, 2)).mean(axis=-2)
    return normalize_actions(chunked)


def states_to_init(states_row: np.ndarray) -> np.ndarray:
    """(..., 5) state rows -> (..., 4) rollout initial states."""
    s = np.asarray(states_row, dtype=np.float64)
    return np.stack([s[..., 0], s[..., 1], s[..., 2], signed_speed(s)], axis=-1)


def to_local(xy_theta: np.ndarray, anchor: np.ndarray) -> np.ndarray:
    """Express poses (..., >=3: x, y, theta, [vx, vy]) in the frame of ``anchor`` (x, y, theta).

    ``anchor`` broadcasts against the leading dims of ``xy_theta`` minus the last.
    """
    p = np.asarray(xy_theta, dtype=np.float64)
    a = np.asarray(anchor, dtype=np.float64)
    c, s = np.cos(a[..., 2]), np.sin(a[..., 2])
    dx = p[..., 0] - a[..., 0]
    dy = p[..., 1] - a[..., 1]
    out = p.copy()
    out[..., 0] = c * dx + s * dy
    out[..., 1] = -s * dx + c * dy
    out[..., 2] = wrap_angle_np(p[..., 2] - a[..., 2])
    if p.shape[-1] >= 5:
        out[..., 3] = c * p[..., 3] + s * p[..., 4]
        out[..., 4] = -s * p[..., 3] + c * p[..., 4]
    return out


def to_global(local: np.ndarray, anchor: np.ndarray) -> np.ndarray:
    """Inverse of :func:`to_local`."""
    p = np.asarray(local, dtype=np.float64)
    a = np.asarray(anchor, dtype=np.float64)
    c, s = np.cos(a[..., 2]), np.sin(a[..., 2])
    out = p.copy()
    out[..., 0] = a[..., 0] + c * p[..., 0] - s * p[..., 1]
    out[..., 1] = a[..., 1] + s * p[..., 0] + c * p[..., 1]
    out[..., 2] = wrap_angle_np(p[..., 2] + a[..., 2])
    if p.shape[-1] >= 5:
        out[..., 3] = c * p[..., 3] - s * p[..., 4]
        out[..., 4] = s * p[..., 3] + c * p[..., 4]
    return out


def _states_from_positions(xy: np.ndarray, init: np.ndarray, dt: float) -> np.ndarray:
    """Headings and speeds implied by consecutive positions under the semi-implicit update."""
    prev = np.concatenate([init[..., None, :2], xy[..., :-1, :]], axis=-2)
    d = xy - prev
    dist = np.hypot(d[..., 0], d[..., 1])
    direction = np.arctan2(d[..., 1], d[..., 0])
    n_t = xy.shape[-2]
    th = np.empty(xy.shape[:-1])
    v = np.empty(xy.shape[:-1])
    th_prev = init[..., 2]
    for t in range(n_t):
        fwd = np.abs(wrap_angle_np(direction[..., t] - th_prev)) <= np.pi / 2
        moving = dist[..., t] > 1e-9
        heading = np.where(fwd, direction[..., t], wrap_angle_np(direction[..., t] + np.pi))
        th[..., t] = np.where(moving, heading, th_prev)
        v[..., t] = np.where(fwd, 1.0, -1.0) * dist[..., t] / dt
        th_prev = th[..., t]
    out = np.empty(xy.shape[:-1] + (5,))
    out[..., :2] = xy
    out[..., 2] = th
    out[..., 3] = v * np.cos(th)
    out[..., 4] = v * np.sin(th)
    return out


def _refine(goal: np.ndarray, init: np.ndarray, actions: np.ndarray, dt: float, chunk: int,
            iters: int, h: float = 1e-6, damping: float = 1e-6) -> np.ndarray:
    """Damped Gauss-Newton on one agent's actions (T_a, 2) against positions (T, 2)."""
    n = actions.size
    eye = np.eye(n)
    a = actions.reshape(-1)
    inits = np.broadcast_to(init, (n + 1, 4))

    def positions(flat):
        return kernels.rollout_forward(inits[:len(flat)], denormalize_actions(flat.reshape(len(flat), -1, 2)),
                                       dt, chunk)[..., :2]

    r = (positions(a[None])[0] - goal).reshape(-1)
    cost = r @ r
    for _ in range(iters):
        probe = positions(np.concatenate([a[None], a[None] + h * eye]))
        J = ((probe[1:] - probe[0]).reshape(n, -1) / h).T
        lhs = J.T @ J + damping * eye
        step = np.linalg.solve(lhs, -J.T @ r)
        cand = a + step
        rc = (positions(cand[None])[0] - goal).reshape(-1)
        if rc @ rc >= cost:
            break
        a, r, cost = cand, rc, rc @ rc
    return a.reshape(actions.shape)


def fit_positions(xy, init, dt: float = DT, chunk: int = CHUNK, iters: int = 5) -> np.ndarray:
    """Normalised actions whose rollout from ``init`` tracks the positions ``xy`` (..., T, 2).

    Headings and speeds read off the position increments give a first guess
    through :func:`inverse_dynamics`; a few damped Gauss-Newton rounds then
    minimise the squared position error.
    """
    goal = np.asarray(xy, dtype=np.float64)
    init_arr = _init_array(init)
    guess = inverse_dynamics(_states_from_positions(goal, init_arr, dt), init_arr, dt, chunk)
    flat_goal = goal.reshape(-1, goal.shape[-2], 2)
    flat_init = np.broadcast_to(init_arr, goal.shape[:-2] + (4,)).reshape(-1, 4)
    flat_guess = guess.reshape(-1, guess.shape[-2], 2)
    out = np.stack([_refine(g, i, a, dt, chunk, iters) for g, i, a in zip(flat_goal, flat_init, flat_guess)])
    return out.reshape(guess.shape)
