"""Pure numpy versions of the hot kernels; used when the extension is absent."""
from __future__ import annotations

import numpy as np

_TWO_PI = 2.0 * np.pi


def _wrap(x):
    y = np.mod(x + np.pi, _TWO_PI) - np.pi
    return np.where(y == -np.pi, np.pi, y)


def rollout_forward(init, actions, dt, chunk):
    """Integrate the semi-implicit unicycle.

    init: (A, 4) rows of (x, y, theta, v); actions: (A, Ta, 2) raw (accel, yaw rate).
    Returns (A, Ta*chunk, 4).
    """
    init = np.ascontiguousarray(init, dtype=np.float64)
    actions = np.ascontiguousarray(actions, dtype=np.float64)
    n, ta = actions.shape[0], actions.shape[1]
    out = np.empty((n, ta * chunk, 4))
    x, y, th, v = (init[:, i].copy() for i in range(4))
    k = 0
    for c in range(ta):
        acc = actions[:, c, 0]
        yaw = actions[:, c, 1]
        for _ in range(chunk):
            v = v + acc * dt
            th = _wrap(th + yaw * dt)
            x = x + v * np.cos(th) * dt
            y = y + v * np.sin(th) * dt
            out[:, k, 0] = x
            out[:, k, 1] = y
            out[:, k, 2] = th
            out[:, k, 3] = v
            k += 1
    return out


def rollout_backward(states, grad_states, dt, chunk):
    """Adjoint of :func:`rollout_forward`.

    Returns (grad_actions (A, Ta, 2), grad_init (A, 4)).
    """
    states = np.ascontiguousarray(states, dtype=np.float64)
    g = np.ascontiguousarray(grad_states, dtype=np.float64)
    n, t_total = states.shape[0], states.shape[1]
    ta = t_total // chunk
    ga = np.zeros((n, ta, 2))
    bx = np.zeros(n)
    by = np.zeros(n)
    bth = np.zeros(n)
    bv = np.zeros(n)
    for k in range(t_total - 1, -1, -1):
        bx = bx + g[:, k, 0]
        by = by + g[:, k, 1]
        bth = bth + g[:, k, 2]
        bv = bv + g[:, k, 3]
        th = states[:, k, 2]
        v = states[:, k, 3]
        c, s = np.cos(th), np.sin(th)
        vt = bv + (bx * c + by * s) * dt
        tht = bth + (by * c - bx * s) * v * dt
        ga[:, k // chunk, 0] += vt * dt
        ga[:, k // chunk, 1] += tht * dt
        bth = tht
        bv = vt
    return ga, np.stack([bx, by, bth, bv], axis=1)


def obb_overlap_frames(boxes):
    """Pairwise strict overlap of oriented rectangles.

    boxes: (F, n, 5) rows of (x, y, theta, length, width). Returns bool (F, n, n)
    with a False diagonal; touching boundaries do not count as overlap.
    """
    b = np.asarray(boxes, dtype=np.float64)
    cx, cy, th = b[..., 0], b[..., 1], b[..., 2]
    hl, hw = 0.5 * b[..., 3], 0.5 * b[..., 4]
    c, s = np.cos(th), np.sin(th)
    dx = cx[:, None, :] - cx[:, :, None]
    dy = cy[:, None, :] - cy[:, :, None]
    overlap = np.ones(dx.shape, dtype=bool)
    # axes of box i (rows) and box j (columns)
    for ux, uy in ((c[:, :, None], s[:, :, None]), (-s[:, :, None], c[:, :, None]),
                   (c[:, None, :], s[:, None, :]), (-s[:, None, :], c[:, None, :])):
        dist = np.abs(dx * ux + dy * uy)
        ri = hl[:, :, None] * np.abs(ux * c[:, :, None] + uy * s[:, :, None]) + \
            hw[:, :, None] * np.abs(-ux * s[:, :, None] + uy * c[:, :, None])
        rj = hl[:, None, :] * np.abs(ux * c[:, None, :] + uy * s[:, None, :]) + \
            hw[:, None, :] * np.abs(-ux * s[:, None, :] + uy * c[:, None, :])
        overlap &= dist < ri + rj
    n = b.shape[1]
    overlap[:, np.arange(n), np.arange(n)] = False
    return overlap
