"""Losses, optimiser, learning-rate schedule and the masked-denoising training loop."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from mdg import autodiff as ad
from mdg.autodiff import Tensor
from mdg.errors import ContractError, NumericError
from mdg.features import Batch, featurize
from mdg.kinematics import fit_positions, rollout, states_to_init
from mdg.model import MDGModel
from mdg.noisefield import (
    apply_noise, batch_mask_axes, batch_mask_rates, sample_random_mask, sample_training_mask,
)
from mdg.synthworld.scenario import Scenario

MASKING_MODES = ("adaptive", "random")


@dataclass
class TrainConfig:
    lam: float = 5.0
    lr: float = 2e-4
    warmup: int = 1000
    decay: float = 0.98
    decay_every: int = 2000
    clip: float = 1.0
    weight_decay: float = 0.01
    epochs: int = 5
    batch_size: int = 8
    seed: int = 0
    masking: str = "adaptive"
    augment: float = 0.0
    ckpt_every: int = 0

    def __post_init__(self):
        if self.masking not in MASKING_MODES:
            raise ContractError(f"unknown masking mode {self.masking!r}; valid: {', '.join(MASKING_MODES)}")
        for name in ("lam", "lr", "decay", "decay_every", "clip", "batch_size"):
            if getattr(self, name) <= 0:
                raise ContractError(f"train.{name} must be positive")
        if self.warmup < 0 or self.weight_decay < 0 or self.epochs < 0 or self.augment < 0:
            raise ContractError("warmup, weight decay, epochs and augment must be non-negative")

    @classmethod
    def desk(cls, **kw) -> "TrainConfig":
        """Short-run preset: higher peak rate and a brief warmup."""
        base = dict(lr=1e-3, warmup=20)
        base.update(kw)
        return cls(**base)

    @classmethod
    def from_mapping(cls, kv: dict) -> "TrainConfig":
        types = {f.name: f.type for f in fields(cls)}
        args = {}
        for k, v in kv.items():
            name = k[len("train."):] if k.startswith("train.") else k
            if name not in types:
                raise ContractError(f"unknown training setting {k!r}")
            t = types[name]
            args[name] = v if t in (str, "str") else (float(v) if t in (float, "float") else int(v))
        return cls(**args)


@dataclass
class LossReport:
    step: int
    lr: float
    total: float
    denoise: float
    predict: float
    grad_norm: float
    per_level: dict = field(default_factory=dict)

    def csv_row(self) -> str:
        vals = (self.lr, self.denoise, self.predict, self.total, self.grad_norm)
        return f"{self.step}," + ",".join(repr(float(v)) for v in vals)


LOG_HEADER = "step,lr,L_d,L_p,total,grad_norm"


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def state_features(s):
    """(x, y, sin theta, cos theta, vx, vy) from (..., 5) states."""
    if isinstance(s, Tensor):
        th = s[..., 2:3]
        return ad.concat([s[..., 0:2], ad.sin(th), ad.cos(th), s[..., 3:5]], axis=-1)
    s = np.asarray(s)
    th = s[..., 2:3]
    return np.concatenate([s[..., 0:2], np.sin(th), np.cos(th), s[..., 3:5]], axis=-1)


def denoising_loss(s_hat, s_gt, valid: np.ndarray, return_cells: bool = False):
    """Mean squared error over valid (agent, t) cells and the six compared channels."""
    valid = np.asarray(valid, dtype=bool)
    n = int(valid.sum())
    if n == 0:
        raise ContractError("denoising loss needs at least one valid cell")
    diff = state_features(s_hat) - state_features(s_gt)
    sq = (diff * diff).sum(axis=-1)
    cells = sq * valid.astype(np.float64)
    loss = cells.sum() * (1.0 / (n * 6))
    return (loss, sq) if return_cells else loss


def smooth_l1(x, beta: float = 1.0):
    """Elementwise smooth-L1 with threshold ``beta``."""
    if isinstance(x, Tensor):
        a = ad.abs_(x)
        return ad.where(a.data < beta, x * x * (0.5 / beta), a - 0.5 * beta)
    a = np.abs(x)
    return np.where(a < beta, 0.5 * x * x / beta, a - 0.5 * beta)


def prediction_loss(preds, s_gt, valid: np.ndarray):
    """Winner-take-all smooth-L1 over the closest of M predicted modes.

    preds (..., M, T, 3) of (x, y, theta); s_gt (..., T, >=3); valid (..., T).
    Mode choice uses the summed (x, y) L2 distance over valid steps.
    """
    p = preds.data if isinstance(preds, Tensor) else np.asarray(preds)
    gt = np.asarray(s_gt)[..., :3]
    valid = np.asarray(valid, dtype=bool)
    w = valid[..., None, :].astype(np.float64)
    dist = (np.hypot(*(p[..., :2] - gt[..., None, :, :2]).transpose(-1, *range(p.ndim - 1))) * w).sum(-1)
    best = np.argmin(dist, axis=-1)
    agent_ok = valid.any(axis=-1)
    n_agents = int(agent_ok.sum())
    if n_agents == 0:
        return preds.sum() * 0.0 if isinstance(preds, Tensor) else 0.0
    lead = p.shape[:-3]
    idx = tuple(np.indices(lead)) + (best,)
    win = preds[idx]                                   # (..., T, 3)
    d = win - gt
    if isinstance(d, Tensor):
        d = ad.concat([d[..., :2], ad.wrap_angle(d[..., 2:3])], axis=-1)
    else:
        d = np.concatenate([d[..., :2], ad.wrap_angle_np(d[..., 2:3])], axis=-1)
    per_step = smooth_l1(d).sum(axis=-1)
    steps = np.maximum(valid.sum(-1), 1).astype(np.float64)
    per_agent = (per_step * valid.astype(np.float64)).sum(axis=-1) * (1.0 / (3.0 * steps))
    return (per_agent * agent_ok.astype(np.float64)).sum() * (1.0 / n_agents)


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------

def learning_rate(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``cfg.lr`` at ``warmup`` steps, then step decay every ``decay_every``."""
    if cfg.warmup > 0 and step < cfg.warmup:
        return cfg.lr * step / cfg.warmup
    return cfg.lr * cfg.decay ** ((step - cfg.warmup) // cfg.decay_every)


def clip_grad_norm(grads: list[np.ndarray], max_norm: float) -> float:
    """Scale grads in place to global norm <= max_norm; returns the pre-clip norm."""
    total = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if total > max_norm:
        scale = max_norm / total
        for g in grads:
            g *= scale
    return total


class AdamW:
    def __init__(self, params, cfg: TrainConfig, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.cfg = cfg
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(t.data) for k, t in params.tensors.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.tensors.items()}

    def step(self, lr: float) -> float:
        names = list(self.params.tensors)
        grads = []
        for k in names:
            t = self.params.tensors[k]
            g = np.zeros_like(t.data) if t.grad is None else t.grad
            t.grad = g
            grads.append(g)
        norm = clip_grad_norm(grads, self.cfg.clip)
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, g in zip(names, grads):
            t = self.params.tensors[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            upd = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            if self.cfg.weight_decay and self.params.decays(k):
                upd = upd + self.cfg.weight_decay * t.data
            t.data = t.data - lr * upd
            if not np.all(np.isfinite(t.data)):
                raise NumericError(f"parameter {k} became non-finite at optimiser step {self.t}")
        return norm


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def perturb_augment(sc: Scenario, magnitude: float, rng: np.random.Generator, blend_steps: int = 10) -> Scenario:
    """Offset the ego's current state and blend back onto its future over ``blend_steps``.

    Offsets are uniform within (0.5 m, 0.5 m, 0.1 rad) times ``magnitude``.
    The blended positions are re-fit through the dynamics so the new future
    is exactly a rollout from the perturbed state.
    """
    if magnitude < 0:
        raise ContractError("perturbation magnitude must be non-negative")
    if magnitude == 0:
        return sc
    e = sc.ego
    off = rng.uniform(-1.0, 1.0, 3) * np.array([0.5, 0.5, 0.1]) * magnitude
    cur = sc.history[e, -1].copy()
    v = cur[3] * np.cos(cur[2]) + cur[4] * np.sin(cur[2])
    new = cur.copy()
    new[:3] += off
    new[2] = ad.wrap_angle_np(new[2])
    new[3], new[4] = v * np.cos(new[2]), v * np.sin(new[2])
    T = sc.future.shape[1]
    k = min(blend_steps, T)
    w = np.ones(T)
    w[:k] = np.arange(1, k + 1) / k
    xy = sc.future[e, :, :2] + (1.0 - w)[:, None] * off[:2]
    init = states_to_init(new)
    chunk = 2 if T % 2 == 0 else 1
    acts = fit_positions(xy[None], init[None], sc.dt, chunk)
    fut = rollout(init[None], acts, sc.dt, chunk).data[0]
    history = sc.history.copy()
    history[e, -1] = new
    future = sc.future.copy()
    future[e] = fut
    return sc.replace(history=history, future=future)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def sample_rng(seed: int, epoch: int, step: int, sample: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, step, sample])


def build_masks(batch: Batch, n_real: list[int], cfg: TrainConfig, K: int, rngs) -> np.ndarray:
    B, N, Ta = batch.gt_actions.shape[:3]
    rates = batch_mask_rates(B)
    m = np.full((B, N, Ta), K, dtype=np.int64)
    for b in range(B):
        rng = rngs[b]
        if cfg.masking == "random":
            m[b, :n_real[b]] = sample_random_mask(n_real[b], Ta, K, rng)
        else:
            axis = batch_mask_axes(1, rng)[0]
            m[b, :n_real[b]] = sample_training_mask(n_real[b], Ta, rates[b], axis, K, rng)
    return m


def train_step(model: MDGModel, opt: AdamW, scenarios: list[Scenario], cfg: TrainConfig,
               epoch: int, step: int) -> LossReport:
    """One optimiser update on a batch; ``step`` is the 1-based global update count."""
    rngs = [sample_rng(cfg.seed, epoch, step, i) for i in range(len(scenarios))]
    if cfg.augment > 0:
        scenarios = [perturb_augment(sc, cfg.augment, r) for sc, r in zip(scenarios, rngs)]
    mc = model.cfg
    batch = featurize(scenarios, mc.max_map, mc.n_routes, mc.horizon, mc.chunk)
    m = build_masks(batch, [s.n_agents for s in scenarios], cfg, mc.K, rngs)
    z = np.empty_like(batch.gt_actions)
    for b in range(batch.size):
        z[b] = apply_noise(batch.gt_actions[b], m[b], model.alphas, rngs[b])[0]

    model.params.zero_grad()
    enc = model.encode(batch)
    x_hat = model.denoise(enc, batch, z, m)
    s_hat = rollout(batch.init_local(), x_hat, mc.dt, mc.chunk)
    l_d, cells = denoising_loss(s_hat, batch.future_local, batch.future_valid, return_cells=True)
    preds = model.predict(enc)
    l_p = prediction_loss(preds, batch.future_local, batch.future_valid)
    total = l_d + cfg.lam * l_p
    if not np.isfinite(total.item()):
        raise NumericError(f"non-finite loss at epoch {epoch} step {step}; "
                           f"scenarios {[s.scenario_id for s in scenarios]}; mask levels {np.unique(m).tolist()}")
    total.backward()
    lr = learning_rate(step, cfg)
    gnorm = opt.step(lr)

    level_of_cell = np.repeat(m, mc.chunk, axis=2)
    per_level = {}
    for lv in np.unique(level_of_cell[batch.future_valid]):
        sel = batch.future_valid & (level_of_cell == lv)
        per_level[int(lv)] = float(cells.data[sel].sum() / (sel.sum() * 6))
    return LossReport(step, lr, total.item(), l_d.item(), float(l_p.item()), gnorm, per_level)


def train(model: MDGModel, scenarios: list[Scenario], cfg: TrainConfig, log=None,
          on_epoch=None) -> list[LossReport]:
    """Run ``cfg.epochs`` shuffled passes. ``log`` receives CSV rows; ``on_epoch(epoch)`` runs after each epoch."""
    if not scenarios:
        raise ContractError("no training scenarios")
    opt = AdamW(model.params, cfg)
    reports = []
    step = 0
    if log is not None:
        log(LOG_HEADER)
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(scenarios))
        for start in range(0, len(order), cfg.batch_size):
            step += 1
            chunk = [scenarios[i] for i in order[start:start + cfg.batch_size]]
            rep = train_step(model, opt, chunk, cfg, epoch, step)
            reports.append(rep)
            if log is not None:
                log(rep.csv_row())
        if on_epoch is not None:
            on_epoch(epoch)
    return reports


def curve_reduction(reports: list[LossReport], frac: float = 0.1) -> float:
    """1 - mean(L_d over the last frac of steps) / mean(L_d over the first frac)."""
    k = max(1, int(round(frac * len(reports))))
    first = np.mean([r.denoise for r in reports[:k]])
    last = np.mean([r.denoise for r in reports[-k:]])
    return float(1.0 - last / first)
