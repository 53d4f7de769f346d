"""The MDG network: scene encoder, auxiliary predictor and denoiser."""
from __future__ import annotations

import numpy as np

from mdg.autodiff import Tensor, load_tensors, save_tensors
from mdg.errors import DataError
from mdg.features import Batch
from mdg.model.config import ModelConfig
from mdg.model.layers import Params
from mdg.model.network import (
    SceneEncoding,
    aux_predict,
    denoise,
    encode_scene,
    init_params,
    relation_encode,
    relation_raw,
    relative_cross_attention,
)
from mdg.noisefield import AlphaSchedule


class MDGModel:
    def __init__(self, cfg: ModelConfig | None = None, seed: int = 0):
        self.cfg = cfg or ModelConfig()
        self.params = init_params(self.cfg, seed)
        self.alphas = AlphaSchedule(self.cfg.K)

    def encode(self, batch: Batch) -> SceneEncoding:
        return encode_scene(self.params, self.cfg, batch)

    def predict(self, enc: SceneEncoding) -> Tensor:
        return aux_predict(self.params, self.cfg, enc)

    def denoise(self, enc: SceneEncoding, batch: Batch, z, m: np.ndarray) -> Tensor:
        return denoise(self.params, self.cfg, enc, batch, z, m, self.alphas)

    def save(self, path) -> None:
        save_tensors(path, {k: t.data for k, t in self.params.tensors.items()}, self.cfg.to_text())

    @classmethod
    def load(cls, path) -> "MDGModel":
        tensors, meta = load_tensors(path)
        cfg = ModelConfig.from_text(meta)
        model = cls(cfg)
        expected = model.params.tensors
        missing = sorted(set(expected) - set(tensors))
        extra = sorted(set(tensors) - set(expected))
        if missing or extra:
            raise DataError(f"checkpoint does not match its config: missing {missing[:3]}, unexpected {extra[:3]}")
        for name, t in expected.items():
            if tensors[name].shape != t.shape:
                raise DataError(f"checkpoint tensor {name} has shape {tensors[name].shape}, config implies {t.shape}")
            t.data = np.array(tensors[name], dtype=np.float64)
        return model


__all__ = [
    "MDGModel", "ModelConfig", "Params", "SceneEncoding", "aux_predict", "denoise", "encode_scene",
    "init_params", "relation_encode", "relation_raw", "relative_cross_attention",
]
