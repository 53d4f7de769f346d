"""Noise-level masks over (agent, action-step) grids and the alpha schedule.

Levels are integers: 0 is clean, 1..K are the trained noise levels, and
``K + 1`` is the guidance level (a fixed alpha of 0.8). Level order is always
decided by alpha, never by the integer value, so guidance sits between the
trained levels whose alphas bracket 0.8.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from mdg.errors import ContractError

ALPHA_MAX = 0.99
ALPHA_MIN = 0.01
GUIDANCE_ALPHA = 0.8


@dataclass(frozen=True)
class AlphaSchedule:
    K: int = 5
    guidance_alpha: float = GUIDANCE_ALPHA

    def __post_init__(self):
        if self.K < 1:
            raise ContractError("K must be >= 1")

    @property
    def guidance(self) -> int:
        return self.K + 1

    @property
    def table(self) -> np.ndarray:
        """alpha for levels 0..K and the guidance slot."""
        if self.K == 1:
            trained = np.array([ALPHA_MIN])
        else:
            trained = np.linspace(ALPHA_MAX, ALPHA_MIN, self.K)
        return np.concatenate([[1.0], trained, [self.guidance_alpha]])

    def alpha(self, levels) -> np.ndarray:
        lv = np.asarray(levels)
        if lv.size and (lv.min() < 0 or lv.max() > self.K + 1):
            raise ContractError(f"noise levels must lie in 0..{self.K + 1}")
        return self.table[lv]


def _expand(alpha: np.ndarray, x: np.ndarray) -> np.ndarray:
    extra = x.ndim - alpha.ndim
    if extra < 0 or x.shape[:alpha.ndim] != alpha.shape:
        raise ContractError(f"mask shape {alpha.shape} does not lead data shape {x.shape}")
    return alpha.reshape(alpha.shape + (1,) * extra)


def apply_noise(x, m, sched: AlphaSchedule, rng: np.random.Generator, eps=None):
    """z = sqrt(alpha(m)) * x + sqrt(1 - alpha(m)) * eps; clean positions are returned bitwise.

    ``m`` covers the leading dims of ``x`` (e.g. agents x steps for x of
    shape agents x steps x channels). Returns (z, eps).
    """
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ContractError("non-finite input to apply_noise")
    a = _expand(sched.alpha(m), x)
    if eps is None:
        eps = rng.standard_normal(x.shape)
    z = np.sqrt(a) * x + np.sqrt(1.0 - a) * eps
    z = np.where(a == 1.0, x, z)
    return z, eps


def renoise(x_hat, m_next, sched: AlphaSchedule, rng: np.random.Generator) -> np.ndarray:
    """Re-noise a clean estimate to the next mask of a schedule."""
    return apply_noise(x_hat, m_next, sched, rng)[0]


def sample_training_mask(n_agents: int, n_steps: int, delta: float, axis: str, K: int,
                         rng: np.random.Generator) -> np.ndarray:
    """Adaptive training mask.

    temporal: the last ceil(delta * n_steps) steps of every agent are fully
    noised; earlier steps get random levels sorted non-decreasing in time.
    agent: ceil(delta * n_agents) random agents are fully noised; every other
    agent gets one random level below K on all of its steps.
    With K == 1 the partially-noised positions are clean (binary masking).
    """
    if not 0.0 <= delta <= 1.0:
        raise ContractError("masking rate must lie in [0, 1]")
    m = np.empty((n_agents, n_steps), dtype=np.int64)
    if axis == "temporal":
        n_full = math.ceil(delta * n_steps)
        head = n_steps - n_full
        if K == 1:
            m[:, :head] = 0
        else:
            m[:, :head] = np.sort(rng.integers(1, K + 1, size=(n_agents, head)), axis=1)
        m[:, head:] = K
    elif axis == "agent":
        n_full = math.ceil(delta * n_agents)
        full = rng.permutation(n_agents)[:n_full]
        if K == 1:
            rows = np.zeros(n_agents, dtype=np.int64)
        else:
            rows = rng.integers(1, K, size=n_agents)
        rows[full] = K
        m[:] = rows[:, None]
    else:
        raise ContractError(f"unknown masking axis {axis!r}")
    return m


def sample_random_mask(n_agents: int, n_steps: int, K: int, rng: np.random.Generator) -> np.ndarray:
    """Unstructured i.i.d. levels in 1..K (masking ablation)."""
    return rng.integers(1, K + 1, size=(n_agents, n_steps))


def batch_mask_rates(batch_size: int) -> np.ndarray:
    """Evenly spaced masking rates across a batch."""
    if batch_size < 1:
        raise ContractError("batch size must be >= 1")
    if batch_size == 1:
        return np.array([0.5])
    return np.arange(batch_size) / (batch_size - 1)


def batch_mask_axes(batch_size: int, rng: np.random.Generator) -> list[str]:
    return ["temporal" if c else "agent" for c in rng.integers(0, 2, size=batch_size)]


@dataclass
class InferenceSchedule:
    masks: list[np.ndarray]          # ordered [m_L, ..., m_0]
    mode: str
    K: int
    guidance: np.ndarray | None = field(default=None)

    @property
    def steps(self) -> int:
        return len(self.masks) - 1


def _blocks(n: int, L: int) -> list[np.ndarray]:
    return np.array_split(np.arange(n), L)


def _axis_masks(n_axis: int, L: int, K: int) -> list[np.ndarray]:
    """Per-step level vectors along one axis, ordered [m_L, ..., m_0].

    After ``L - l`` blocks have been cleared, the upcoming block i (1 = nearest)
    sits at level clip(i + K - l, 1, K); the first mask is all K.
    """
    blocks = _blocks(n_axis, L)
    out = [np.full(n_axis, K, dtype=np.int64)]
    for ell in range(L - 1, -1, -1):
        vec = np.zeros(n_axis, dtype=np.int64)
        cleared = L - ell
        for i, idx in enumerate(blocks[cleared:], start=1):
            vec[idx] = min(K, max(1, i + K - ell))
        out.append(vec)
    return out


def build_schedule(mode: str, L: int, n_agents: int, n_steps: int, K: int) -> InferenceSchedule:
    if L < 1:
        raise ContractError("a schedule needs at least one step")
    if mode == "one_step":
        if L != 1:
            raise ContractError("one_step schedules have exactly one step")
        masks = [np.full((n_agents, n_steps), K, dtype=np.int64), np.zeros((n_agents, n_steps), dtype=np.int64)]
    elif mode == "temporal":
        masks = [np.broadcast_to(v[None, :], (n_agents, n_steps)).copy() for v in _axis_masks(n_steps, L, K)]
    elif mode == "agent":
        masks = [np.broadcast_to(v[:, None], (n_agents, n_steps)).copy() for v in _axis_masks(n_agents, L, K)]
    else:
        raise ContractError(f"unknown schedule mode {mode!r}")
    return InferenceSchedule(masks=masks, mode=mode, K=K)


def guidance_mask(n_agents: int, n_steps: int, targets, K: int) -> np.ndarray:
    g = np.zeros((n_agents, n_steps), dtype=np.int64)
    g[list(targets), :] = K + 1
    return g


def compose_guidance(m, g, sched: AlphaSchedule) -> np.ndarray:
    """Elementwise 'noisier of the two', judged by alpha."""
    m = np.asarray(m)
    g = np.asarray(g)
    if m.shape != g.shape:
        raise ContractError("mask and guidance mask shapes differ")
    return np.where(sched.alpha(g) < sched.alpha(m), g, m)


def check_schedule(sched: InferenceSchedule, alpha: AlphaSchedule) -> None:
    """Raise unless alpha is non-decreasing along the schedule and it ends clean."""
    for prev, nxt in zip(sched.masks[:-1], sched.masks[1:]):
        if np.any(alpha.alpha(nxt) < alpha.alpha(prev)):
            raise ContractError("schedule increases noise at some position")
    if np.any(sched.masks[-1] != 0):
        raise ContractError("schedule does not end with a clean mask")


_DIGITS = "0123456789abcdefghijklmnopqrstuvwxyz"


def format_schedule(sched: InferenceSchedule) -> str:
    """Plain-text level grid, one block per step; guidance prints as 'g'."""
    n_agents, n_steps = sched.masks[0].shape
    lines = [f"# schedule mode={sched.mode} steps={sched.steps} agents={n_agents} horizon={n_steps} K={sched.K}"]
    for i, m in enumerate(sched.masks):
        lines.append(f"step {sched.steps - i}")
        for row in m:
            lines.append("".join("g" if v == sched.K + 1 else _DIGITS[v] for v in row))
    return "\n".join(lines) + "\n"


def parse_schedule(text: str) -> InferenceSchedule:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    header = dict(tok.split("=") for tok in lines[0].lstrip("# ").split()[1:])
    K = int(header["K"])
    masks, cur = [], None
    for ln in lines[1:]:
        if ln.startswith("step"):
            cur = []
            masks.append(cur)
        else:
            cur.append([K + 1 if ch == "g" else _DIGITS.index(ch) for ch in ln])
    return InferenceSchedule(masks=[np.array(m, dtype=np.int64) for m in masks], mode=header["mode"], K=K)
