"""The full reconstructor: posed views -> tokens -> SSM stack -> Gaussians."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .decoder import Decoder, GaussianSet
from .geometry import CameraView, pluecker_rays
from .ssm import Reconstructor
from .tokenizer import Tokenizer, fuse_view, sequence_length


@dataclass
class ModelConfig:
    image_size: int = 64
    patch: int = 8
    dim: int = 64
    depth: int = 2
    d_state: int = 8
    d_conv: int = 4
    expand: int = 2
    n_bins: int = 32
    n_views: int = 4
    mode: str = "3d"

    @property
    def seq_len(self) -> int:
        return sequence_length(self.n_views, self.image_size, self.image_size, self.patch)

    @classmethod
    def full_scale(cls) -> "ModelConfig":
        return cls(image_size=448, patch=14, dim=512, depth=14, d_state=16, n_bins=128)


class MVGamba(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.tokenizer = Tokenizer(cfg.dim, cfg.patch, cfg.n_views, cfg.image_size, cfg.image_size)
        self.reconstructor = Reconstructor(cfg.dim, cfg.depth, cfg.d_state, cfg.d_conv, cfg.expand)
        self.decoder = Decoder(cfg.dim, cfg.n_bins, cfg.mode)

    def forward(self, fused: torch.Tensor, tau: float = 1.0, mode: str = "train", gumbel=None, rng=None) -> GaussianSet:
        """``fused``: (..., N, H, W, 9) views already concatenated with their ray maps."""
        seq = self.tokenizer(fused)
        tokens = self.reconstructor(seq.tokens)
        return self.decoder(tokens, tau, mode, gumbel, rng)


def fuse_inputs(images, views: list[CameraView], dtype=None) -> torch.Tensor:
    """Stack (H, W, 3) images with their Plücker maps into an (N, H, W, 9) tensor."""
    dtype = dtype or torch.get_default_dtype()
    maps = [fuse_view(np.asarray(img, dtype=np.float64), pluecker_rays(v)) for img, v in zip(images, views)]
    return torch.as_tensor(np.stack(maps), dtype=dtype)


_META_KEYS = ("image_size", "patch", "dim", "depth", "d_state", "d_conv", "expand", "n_bins", "n_views")


def model_tensors(model: MVGamba) -> dict[str, np.ndarray]:
    out = {f"model/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    for key in _META_KEYS:
        out[f"meta/{key}"] = np.float32(getattr(model.cfg, key))
    out["meta/mode"] = np.float32(0 if model.cfg.mode == "3d" else 1)
    return out


def model_from_tensors(tensors: dict[str, np.ndarray]) -> MVGamba:
    cfg = ModelConfig(**{k: int(tensors[f"meta/{k}"]) for k in _META_KEYS},
                      mode="3d" if int(tensors["meta/mode"]) == 0 else "2d")
    model = MVGamba(cfg)
    state = {k[len("model/"):]: torch.from_numpy(np.array(v)) for k, v in tensors.items() if k.startswith("model/")}
    model.load_state_dict(state)
    return model
