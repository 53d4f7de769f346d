"""Parameter store and the small building blocks shared by encoder and denoiser."""
from __future__ import annotations

import math

import numpy as np

from mdg import autodiff as ad
from mdg.autodiff import Tensor


class Params:
    """Named parameter tensors with deterministic initialisation.

    Names ending in ``.b``, ``.gain``, ``.bias`` or containing ``emb`` are
    exempt from weight decay.
    """

    def __init__(self, seed: int = 0):
        self.tensors: dict[str, Tensor] = {}
        self._rng = np.random.default_rng(seed)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.tensors:
            raise KeyError(f"duplicate parameter {name}")
        t = Tensor(np.asarray(value, dtype=np.float64), requires_grad=True, name=name)
        self.tensors[name] = t
        return t

    def linear(self, name: str, d_in: int, d_out: int, bias: bool = True) -> None:
        bound = 1.0 / math.sqrt(d_in)
        self.add(f"{name}.w", self._rng.uniform(-bound, bound, (d_in, d_out)))
        if bias:
            self.add(f"{name}.b", np.zeros(d_out))

    def mlp(self, name: str, dims: list[int]) -> None:
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            self.linear(f"{name}.{i}", a, b)

    def norm(self, name: str, d: int) -> None:
        self.add(f"{name}.gain", np.ones(d))
        self.add(f"{name}.bias", np.zeros(d))

    def embedding(self, name: str, n: int, d: int) -> None:
        self.add(name, self._rng.normal(0.0, 1.0 / math.sqrt(d), (n, d)))

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def decays(self, name: str) -> bool:
        return not (name.endswith(".b") or name.endswith(".gain") or name.endswith(".bias") or "emb" in name)

    def n_values(self) -> int:
        return sum(t.size for t in self.tensors.values())


def linear(P: Params, name: str, x) -> Tensor:
    y = ad.matmul(x, P[f"{name}.w"]) if _rank(x) >= 2 else ad.matmul(ad.reshape(x, (1, -1)), P[f"{name}.w"])
    if f"{name}.b" in P:
        y = y + P[f"{name}.b"]
    return y


def _rank(x) -> int:
    return x.ndim if isinstance(x, Tensor) else np.ndim(x)


def mlp(P: Params, name: str, x, n_layers: int) -> Tensor:
    for i in range(n_layers):
        x = linear(P, f"{name}.{i}", x)
        if i < n_layers - 1:
            x = ad.gelu(x)
    return x


def norm(P: Params, name: str, x) -> Tensor:
    return ad.layernorm(x, P[f"{name}.gain"], P[f"{name}.bias"])


def init_mixer(P: Params, name: str, n_tokens: int, d_in: int, d: int, depth: int) -> None:
    P.linear(f"{name}.inp", d_in, d)
    for k in range(depth):
        P.norm(f"{name}.{k}.n1", d)
        P.mlp(f"{name}.{k}.tok", [n_tokens, n_tokens, n_tokens])
        P.norm(f"{name}.{k}.n2", d)
        P.mlp(f"{name}.{k}.ch", [d, 2 * d, d])
    P.norm(f"{name}.out", d)


def mixer(P: Params, name: str, x, depth: int) -> Tensor:
    """MLP-Mixer over (..., tokens, features) followed by max-pooling over tokens."""
    h = linear(P, f"{name}.inp", x)
    nd = h.ndim
    swap = tuple(range(nd - 2)) + (nd - 1, nd - 2)
    for k in range(depth):
        t = ad.transpose(norm(P, f"{name}.{k}.n1", h), swap)
        h = h + ad.transpose(mlp(P, f"{name}.{k}.tok", t, 2), swap)
        h = h + mlp(P, f"{name}.{k}.ch", norm(P, f"{name}.{k}.n2", h), 2)
    return norm(P, f"{name}.out", ad.max_(h, axis=nd - 2))


def sinusoid(x: np.ndarray, d: int, max_period: float = 100.0) -> np.ndarray:
    """Sinusoidal features of real values: (...,) -> (..., d)."""
    half = d // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    ang = np.asarray(x, dtype=np.float64)[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


def init_attention(P: Params, name: str, d: int, relational: bool) -> None:
    for k in ("q", "k", "v", "o"):
        P.linear(f"{name}.{k}", d, d)
    if relational:
        P.linear(f"{name}.r", d, d, bias=False)
    P.norm(f"{name}.n", d)


def split_heads(x: Tensor, h: int) -> Tensor:
    return ad.reshape(x, x.shape[:-1] + (h, x.shape[-1] // h))


def merge_heads(x: Tensor) -> Tensor:
    return ad.reshape(x, x.shape[:-2] + (x.shape[-2] * x.shape[-1],))


def key_mask(q_valid: np.ndarray, k_valid: np.ndarray, self_pairs: bool) -> np.ndarray:
    """(B, Q, K) participation mask.

    Invalid queries still need a non-empty row; when queries and keys are the
    same entity set they fall back to attending to themselves, otherwise to
    every key. Their outputs are never read.
    """
    m = np.broadcast_to(k_valid[:, None, :], (k_valid.shape[0], q_valid.shape[1], k_valid.shape[1])).copy()
    if self_pairs:
        idx = np.arange(m.shape[1])
        m[:, idx, idx] = True
    empty = ~m.any(axis=-1)
    m[empty] = True
    return m
