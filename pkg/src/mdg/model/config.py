"""Model configuration and its plain-text key=value form."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

from mdg.errors import ContractError
from mdg.kinematics import ACTION_MEAN, ACTION_STD, CHUNK, DT


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_heads: int = 2
    enc_layers: int = 2
    dec_blocks: int = 1
    mixer_depth: int = 2
    ffn_mult: int = 2
    n_freq: int = 8
    n_modes: int = 6
    K: int = 5
    max_agents: int = 16
    max_map: int = 32
    n_routes: int = 4
    history: int = 10
    horizon: int = 40
    chunk: int = CHUNK
    dt: float = DT
    n_waypoints: int = 16

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ContractError("d_model must be divisible by n_heads")
        if self.horizon % self.chunk:
            raise ContractError("horizon must be a multiple of chunk")
        for f in fields(self):
            if getattr(self, f.name) <= 0:
                raise ContractError(f"model.{f.name} must be positive")

    @property
    def action_steps(self) -> int:
        return self.horizon // self.chunk

    @classmethod
    def paper_scale(cls) -> "ModelConfig":
        return cls(d_model=256, n_heads=8, enc_layers=6, dec_blocks=2, max_agents=128, history=11, horizon=80)

    def to_text(self) -> str:
        lines = [f"model.{k}={v}" for k, v in asdict(self).items()]
        lines.append("model.action_mean=" + ",".join(repr(float(x)) for x in ACTION_MEAN))
        lines.append("model.action_std=" + ",".join(repr(float(x)) for x in ACTION_STD))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        kv = {}
        for ln in text.splitlines():
            ln = ln.strip()
            if not ln or ln.startswith("#"):
                continue
            k, _, v = ln.partition("=")
            kv[k.strip()] = v.strip()
        return cls.from_mapping(kv)

    @classmethod
    def from_mapping(cls, kv: dict) -> "ModelConfig":
        types = {f.name: f.type for f in fields(cls)}
        args = {}
        for k, v in kv.items():
            name = k[len("model."):] if k.startswith("model.") else k
            if name in ("action_mean", "action_std"):
                continue
            if name not in types:
                raise ContractError(f"unknown model setting {k!r}")
            args[name] = float(v) if types[name] in (float, "float") else int(v)
        return cls(**args)
