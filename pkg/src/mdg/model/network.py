"""Scene encoder, auxiliary predictor and the three-attention denoiser."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from mdg import autodiff as ad
from mdg.autodiff import Tensor, wrap_angle_np
from mdg.errors import ContractError
from mdg.features import N_PHASES, POS_SCALE, Batch
from mdg.kinematics import rollout
from mdg.model.config import ModelConfig
from mdg.model.layers import (
    Params, init_attention, init_mixer, key_mask, linear, merge_heads, mixer, mlp, norm, sinusoid, split_heads,
)
from mdg.noisefield import AlphaSchedule

SELF_RELATION = 1e-3
N_RAW = 4
ALPHA_FEATS = 16


# ---------------------------------------------------------------------------
# relations
# ---------------------------------------------------------------------------

def relation_raw(src: np.ndarray, dst: np.ndarray, same_set: bool) -> np.ndarray:
    """(dx, dy, dtheta, distance) of every dst pose in every src frame: (B, Q, K, 4).

    With ``same_set`` the diagonal is the self-relation constant.
    """
    c = np.cos(src[..., 2])[:, :, None]
    s = np.sin(src[..., 2])[:, :, None]
    dx = dst[:, None, :, 0] - src[:, :, None, 0]
    dy = dst[:, None, :, 1] - src[:, :, None, 1]
    lx = c * dx + s * dy
    ly = -s * dx + c * dy
    dth = wrap_angle_np(dst[:, None, :, 2] - src[:, :, None, 2])
    raw = np.stack([lx, ly, dth, np.hypot(lx, ly)], axis=-1)
    if same_set:
        idx = np.arange(raw.shape[1])
        raw[:, idx, idx, :] = SELF_RELATION
    return raw


def fourier_features(raw: np.ndarray, n_freq: int) -> np.ndarray:
    freqs = 2.0 * np.pi * np.geomspace(1.0 / 200.0, 2.0, n_freq)
    ang = raw[..., None] * freqs
    feats = np.concatenate([np.sin(ang), np.cos(ang), raw[..., None] / 50.0], axis=-1)
    return feats.reshape(raw.shape[:-1] + (raw.shape[-1] * (2 * n_freq + 1),))


def relation_encode(P: Params, cfg: ModelConfig, src, dst, same_set: bool) -> Tensor:
    """Embedded relation table (B, Q, K, D)."""
    feats = fourier_features(relation_raw(src, dst, same_set), cfg.n_freq)
    return mlp(P, "rel", feats, 2)


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

def _project_rel(P, name, rel, h):
    return split_heads(linear(P, f"{name}.r", rel), h)


def relative_cross_attention(P: Params, name: str, q_tok, kv_tok, rel, mask, h: int) -> Tensor:
    """Post-norm residual attention with relation terms on keys and values.

    q_tok (B, Q, D), kv_tok (B, K, D), rel (B, Q, K, D) or None, mask (B, Q, K).
    """
    d = q_tok.shape[-1] // h
    q = split_heads(linear(P, f"{name}.q", q_tok), h)
    k = split_heads(linear(P, f"{name}.k", kv_tok), h)
    v = split_heads(linear(P, f"{name}.v", kv_tok), h)
    s = ad.einsum("bqhd,bkhd->bhqk", q, k)
    if rel is not None:
        e = _project_rel(P, name, rel, h)
        s = s + ad.einsum("bqhd,bqkhd->bhqk", q, e)
    a = ad.softmax_lastdim(s * (1.0 / math.sqrt(d)), mask[:, None])
    o = ad.einsum("bhqk,bkhd->bqhd", a, v)
    if rel is not None:
        o = o + ad.einsum("bhqk,bqkhd->bqhd", a, e)
    return norm(P, f"{name}.n", q_tok + linear(P, f"{name}.o", merge_heads(o)))


def _ffn(P, name, x):
    return norm(P, f"{name}.n", x + mlp(P, f"{name}.mlp", x, 2))


def _init_ffn(P, name, d, mult):
    P.mlp(f"{name}.mlp", [d, mult * d, d])
    P.norm(f"{name}.n", d)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def init_params(cfg: ModelConfig, seed: int = 0) -> Params:
    P = Params(seed)
    D = cfg.d_model
    W = cfg.n_waypoints
    init_mixer(P, "enc.agent", cfg.history, 7, D, cfg.mixer_depth)
    init_mixer(P, "enc.map", W, 3, D, cfg.mixer_depth)
    init_mixer(P, "enc.route", W, 3, D, cfg.mixer_depth)
    P.embedding("enc.type_emb", 2, D)
    P.embedding("enc.light_emb", N_PHASES, D)
    P.linear("enc.egofuse", 2 * D, D)
    P.mlp("rel", [N_RAW * (2 * cfg.n_freq + 1), D, D])
    for i in range(cfg.enc_layers):
        init_attention(P, f"enc.l{i}.att", D, relational=True)
        _init_ffn(P, f"enc.l{i}.ffn", D, cfg.ffn_mult)
    P.mlp("aux", [D, 2 * D, cfg.n_modes * cfg.horizon * 3])

    P.mlp("dn.inp", [7, D, D])
    P.embedding("dn.mask_emb", cfg.K + 2, D)
    P.linear("dn.alpha", ALPHA_FEATS, D)
    P.linear("dn.ctx", D, D)
    for i in range(cfg.dec_blocks):
        init_attention(P, f"dn.b{i}.time", D, relational=False)
        init_attention(P, f"dn.b{i}.agent", D, relational=True)
        init_attention(P, f"dn.b{i}.scene", D, relational=True)
        init_attention(P, f"dn.b{i}.route", D, relational=True)
        _init_ffn(P, f"dn.b{i}.ffn", D, cfg.ffn_mult)
    P.mlp("dn.out", [D, D, 2])
    return P


# ---------------------------------------------------------------------------
# encoder
# ---------------------------------------------------------------------------

@dataclass
class SceneEncoding:
    tokens: Tensor           # (B, E, D)
    rel: Tensor              # (B, E, E, D)
    entity_valid: np.ndarray
    route_tokens: Tensor     # (B, R, D)
    route_rel: Tensor        # (B, R, D) ego -> route
    n_agents: int

    @property
    def agent_feats(self) -> Tensor:
        return self.tokens[:, :self.n_agents]


def encode_scene(P: Params, cfg: ModelConfig, batch: Batch) -> SceneEncoding:
    if not batch.agent_valid.any(axis=1).all():
        raise ContractError("every scene needs at least one valid agent")
    B, N = batch.agent_valid.shape
    agents = mixer(P, "enc.agent", batch.agent_hist, cfg.mixer_depth) + ad.take(P["enc.type_emb"], batch.agent_type)
    maps = mixer(P, "enc.map", batch.map_feat, cfg.mixer_depth)
    lights = ad.take(P["enc.light_emb"], batch.light_phase)
    routes = mixer(P, "enc.route", batch.route_feat, cfg.mixer_depth)

    # ego token carries the pooled route encoding
    rv = batch.route_valid[..., None]
    pooled = ad.max_(ad.where(rv, routes, np.full(routes.shape, -1e9)), axis=1)
    pooled = ad.where(rv.any(axis=1), pooled, np.zeros(pooled.shape))
    both = ad.concat([agents, ad.broadcast_to(ad.reshape(pooled, (B, 1, -1)), agents.shape)], axis=-1)
    is_ego = (np.arange(N)[None, :] == batch.ego[:, None])[..., None]
    agents = ad.where(is_ego, linear(P, "enc.egofuse", both), agents)

    tokens = ad.concat([agents, maps, lights], axis=1)
    anchor = batch.entity_anchor()
    valid = batch.entity_valid()
    rel = relation_encode(P, cfg, anchor, anchor, same_set=True)
    mask = key_mask(valid, valid, self_pairs=True)
    for i in range(cfg.enc_layers):
        tokens = relative_cross_attention(P, f"enc.l{i}.att", tokens, tokens, rel, mask, cfg.n_heads)
        tokens = _ffn(P, f"enc.l{i}.ffn", tokens)
    # padding slots carry no information; keep them exactly zero
    tokens = ad.where(valid[..., None], tokens, np.zeros(tokens.shape))

    ego_anchor = batch.agent_anchor[np.arange(B), batch.ego][:, None, :]
    route_rel = relation_encode(P, cfg, ego_anchor, batch.route_anchor, same_set=False)
    route_rel = ad.reshape(route_rel, (B, route_rel.shape[2], -1))
    return SceneEncoding(tokens, rel, valid, routes, route_rel, N)


def aux_predict(P: Params, cfg: ModelConfig, enc: SceneEncoding) -> Tensor:
    """Multi-modal futures (B, N, M, T, 3) in agent frames, metres."""
    out = mlp(P, "aux", enc.agent_feats, 2)
    B, N = out.shape[:2]
    return ad.reshape(out, (B, N, cfg.n_modes, cfg.horizon, 3)) * POS_SCALE


# ---------------------------------------------------------------------------
# denoiser
# ---------------------------------------------------------------------------

def noisy_states(z: np.ndarray, batch: Batch, cfg: ModelConfig) -> np.ndarray:
    """Roll noised actions out in agent frames and keep the chunk-end states, scaled."""
    st = rollout(batch.init_local(), z, cfg.dt, cfg.chunk).data
    st = st[..., cfg.chunk - 1::cfg.chunk, :].copy()
    st[..., [0, 1, 3, 4]] /= POS_SCALE
    return st


def _attn_out(P, name, x, o):
    return norm(P, f"{name}.n", x + linear(P, f"{name}.o", merge_heads(o)))


def _temporal(P, name, x, h):
    d = x.shape[-1] // h
    q, k, v = (split_heads(linear(P, f"{name}.{c}", x), h) for c in "qkv")
    a = ad.softmax_lastdim(ad.einsum("bnthd,bnshd->bnhts", q, k) * (1.0 / math.sqrt(d)))
    return _attn_out(P, name, x, ad.einsum("bnhts,bnshd->bnthd", a, v))


def _inter_agent(P, name, x, rel, mask, h):
    d = x.shape[-1] // h
    q, k, v = (split_heads(linear(P, f"{name}.{c}", x), h) for c in "qkv")
    e = _project_rel(P, name, rel, h)
    s = ad.einsum("bithd,bjthd->bthij", q, k) + ad.einsum("bithd,bijhd->bthij", q, e)
    a = ad.softmax_lastdim(s * (1.0 / math.sqrt(d)), mask[:, None, None])
    o = ad.einsum("bthij,bjthd->bithd", a, v) + ad.einsum("bthij,bijhd->bithd", a, e)
    return _attn_out(P, name, x, o)


def _agent_scene(P, name, x, tokens, rel, mask, h):
    d = x.shape[-1] // h
    q = split_heads(linear(P, f"{name}.q", x), h)
    k = split_heads(linear(P, f"{name}.k", tokens), h)
    v = split_heads(linear(P, f"{name}.v", tokens), h)
    e = _project_rel(P, name, rel, h)
    s = ad.einsum("bithd,behd->bthie", q, k) + ad.einsum("bithd,biehd->bthie", q, e)
    a = ad.softmax_lastdim(s * (1.0 / math.sqrt(d)), mask[:, None, None])
    o = ad.einsum("bthie,behd->bithd", a, v) + ad.einsum("bthie,biehd->bithd", a, e)
    return _attn_out(P, name, x, o)


def _ego_route(P, name, x, ego, routes, route_rel, route_valid, h):
    B, N = x.shape[:2]
    d = x.shape[-1] // h
    has_route = route_valid.any(axis=1)
    if not has_route.any():
        return x
    xe = x[np.arange(B), ego]                                      # (B, T, D)
    q = split_heads(linear(P, f"{name}.q", xe), h)
    k = split_heads(linear(P, f"{name}.k", routes), h)
    v = split_heads(linear(P, f"{name}.v", routes), h)
    e = _project_rel(P, name, route_rel, h)
    s = ad.einsum("bthd,brhd->bhtr", q, k) + ad.einsum("bthd,brhd->bhtr", q, e)
    mask = np.where(has_route[:, None], route_valid, True)[:, None, None, :]
    a = ad.softmax_lastdim(s * (1.0 / math.sqrt(d)), mask)
    o = ad.einsum("bhtr,brhd->bthd", a, v) + ad.einsum("bhtr,brhd->bthd", a, e)
    ye = _attn_out(P, name, xe, o)
    sel = ((np.arange(N)[None, :] == ego[:, None]) & has_route[:, None])[:, :, None, None]
    return ad.where(sel, ad.reshape(ye, (B, 1) + ye.shape[1:]), x)


def denoise(P: Params, cfg: ModelConfig, enc: SceneEncoding, batch: Batch, z, m: np.ndarray,
            sched: AlphaSchedule | None = None) -> Tensor:
    """Clean normalised action estimate (B, N, T_a, 2) from noised actions ``z`` under mask ``m``."""
    z = np.asarray(z.data if isinstance(z, Tensor) else z, dtype=np.float64)
    B, N, Ta = z.shape[:3]
    if m.shape != (B, N, Ta):
        raise ContractError(f"mask shape {m.shape} does not match actions {z.shape[:3]}")
    if N != enc.n_agents:
        raise ContractError("agent count differs between scene encoding and actions")
    sched = sched or AlphaSchedule(cfg.K)
    st = noisy_states(z, batch, cfg)
    x = mlp(P, "dn.inp", np.concatenate([st, z], axis=-1), 2)
    alpha = sched.alpha(m)
    x = x + ad.take(P["dn.mask_emb"], m) + linear(P, "dn.alpha", sinusoid(100.0 * alpha, ALPHA_FEATS))
    x = x + sinusoid(np.arange(Ta), cfg.d_model)
    ctx = linear(P, "dn.ctx", enc.agent_feats)
    x = x + ad.reshape(ctx, (B, N, 1, cfg.d_model))

    valid = batch.agent_valid
    amask = key_mask(valid, valid, self_pairs=True)
    smask = key_mask(valid, enc.entity_valid, self_pairs=False)
    rel_aa = enc.rel[:, :N, :N]
    rel_as = enc.rel[:, :N]
    for i in range(cfg.dec_blocks):
        x = _temporal(P, f"dn.b{i}.time", x, cfg.n_heads)
        x = _inter_agent(P, f"dn.b{i}.agent", x, rel_aa, amask, cfg.n_heads)
        x = _agent_scene(P, f"dn.b{i}.scene", x, enc.tokens, rel_as, smask, cfg.n_heads)
        x = _ego_route(P, f"dn.b{i}.route", x, batch.ego, enc.route_tokens, enc.route_rel,
                       batch.route_valid, cfg.n_heads)
        x = _ffn(P, f"dn.b{i}.ffn", x)
    return mlp(P, "dn.out", x, 2)
