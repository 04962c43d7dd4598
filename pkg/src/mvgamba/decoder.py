"""Decode causal tokens into constrained Gaussian primitives (position bins, scale, opacity, color, RotNet)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .geometry import CANONICAL_ROTATIONS

S_BASE = 0.02
S_MAX = 0.3
S_MIN = 1e-8  # keeps scales strictly positive when softplus underflows
ALPHA_EPS = 1e-6  # keeps opacity inside the open interval when sigmoid saturates
N_ROTATIONS = 32


@dataclass
class GaussianSet:
    means: torch.Tensor  # (..., K, 3) in [-1, 1]
    scales: torch.Tensor  # (..., K, 3) or (..., K, 2) for disks
    colors: torch.Tensor  # (..., K, 3) in [0, 1]
    opacities: torch.Tensor  # (..., K) in (0, 1)
    quats: torch.Tensor  # (..., K, 4) unit, (w, x, y, z)
    mode: str = "3d"

    def __post_init__(self):
        if self.mode not in ("3d", "2d"):
            raise ValueError(f"unknown Gaussian mode {self.mode!r}")
        expected = 3 if self.mode == "3d" else 2
        if self.scales.shape[-1] != expected:
            raise ValueError(f"{self.mode} mode needs {expected} scale components, got {self.scales.shape[-1]}")

    @property
    def count(self) -> int:
        return self.means.shape[-2]

    def __getitem__(self, idx) -> "GaussianSet":
        """Index the leading batch dimension."""
        return GaussianSet(self.means[idx], self.scales[idx], self.colors[idx], self.opacities[idx],
                           self.quats[idx], self.mode)

    def select(self, index) -> "GaussianSet":
        """Subset along the primitive axis."""
        index = torch.as_tensor(index)
        return GaussianSet(self.means[..., index, :], self.scales[..., index, :], self.colors[..., index, :],
                           self.opacities[..., index], self.quats[..., index, :], self.mode)

    def detach(self) -> "GaussianSet":
        return GaussianSet(self.means.detach(), self.scales.detach(), self.colors.detach(),
                           self.opacities.detach(), self.quats.detach(), self.mode)

    def to(self, dtype) -> "GaussianSet":
        return GaussianSet(self.means.to(dtype), self.scales.to(dtype), self.colors.to(dtype),
                           self.opacities.to(dtype), self.quats.to(dtype), self.mode)

    @staticmethod
    def concat(sets: list["GaussianSet"]) -> "GaussianSet":
        cat = lambda name: torch.cat([getattr(s, name) for s in sets], dim=-2 if name != "opacities" else -1)
        return GaussianSet(cat("means"), cat("scales"), cat("colors"), cat("opacities"), cat("quats"), sets[0].mode)


def gumbel_noise(rng: np.random.Generator, shape, dtype=None) -> torch.Tensor:
    u = rng.random(shape)
    u = np.clip(u, 1e-12, 1.0 - 1e-12)
    return torch.as_tensor(-np.log(-np.log(u)), dtype=dtype or torch.get_default_dtype())


def temperature_at(step: int, total_steps: int, start: float = 2.0, end: float = 0.01) -> float:
    """Exponential interpolation of the Gumbel-Softmax temperature over training iterations."""
    if total_steps <= 0:
        return end
    frac = min(max(step / total_steps, 0.0), 1.0)
    return start * (end / start) ** frac


class Decoder(nn.Module):
    def __init__(self, dim: int, n_bins: int = 128, mode: str = "3d", s_base: float = S_BASE, s_max: float = S_MAX,
                 straight_through: bool = False):
        super().__init__()
        self.mode, self.n_bins, self.s_base, self.s_max = mode, n_bins, s_base, s_max
        self.straight_through = straight_through
        self.fc1 = nn.Linear(dim, 4 * dim)
        self.fc2 = nn.Linear(4 * dim, dim)
        self.pos_head = nn.Linear(dim, 3 * n_bins)
        self.scale_head = nn.Linear(dim, 3 if mode == "3d" else 2)
        self.opacity_head = nn.Linear(dim, 1)
        self.color_head = nn.Linear(dim, 3)
        self.rot_head = nn.Linear(dim, N_ROTATIONS, bias=False)
        self.register_buffer("bin_centers", torch.linspace(-1.0, 1.0, n_bins, dtype=torch.float64), persistent=False)
        self.register_buffer("rotation_table", torch.as_tensor(CANONICAL_ROTATIONS, dtype=torch.float64),
                             persistent=False)

    def channel_mlp(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.silu(self.fc1(x)))

    def decode_position(self, z: torch.Tensor) -> torch.Tensor:
        logits = self.pos_head(z).unflatten(-1, (3, self.n_bins))
        return (torch.softmax(logits, dim=-1) * self.bin_centers.to(z.dtype)).sum(-1)

    def decode_scale(self, z: torch.Tensor) -> torch.Tensor:
        return (self.s_base * F.softplus(self.scale_head(z))).clamp(min=S_MIN, max=self.s_max)

    def decode_opacity(self, z: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.opacity_head(z)).squeeze(-1).clamp(ALPHA_EPS, 1.0 - ALPHA_EPS)

    def decode_color(self, z: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.color_head(z))

    def rotnet(self, z: torch.Tensor, tau: float = 1.0, mode: str = "train", gumbel: torch.Tensor | None = None,
               rng: np.random.Generator | None = None):
        """Return ``(quaternion, probabilities)`` over the 32 canonical rotations.

        Training mode draws a Gumbel-Softmax sample at temperature ``tau``; the
        quaternion is the normalized probability-weighted mix of the table
        (or the hard pick with a straight-through gradient when configured).
        Inference mode takes the argmax and ignores any noise.
        """
        logits = self.rot_head(z)
        table = self.rotation_table.to(z.dtype)
        if mode == "infer":
            k = logits.argmax(-1)
            return table[k], F.one_hot(k, N_ROTATIONS).to(z.dtype)
        if mode != "train":
            raise ValueError(f"unknown rotnet mode {mode!r}")
        if not tau > 0:
            raise ValueError(f"temperature must be positive, got {tau}")
        if gumbel is None:
            if rng is None:
                raise ValueError("training mode needs gumbel noise or an rng")
            gumbel = gumbel_noise(rng, logits.shape, z.dtype)
        p = torch.softmax((logits + gumbel) / tau, dim=-1)
        if self.straight_through:
            hard = F.one_hot(p.argmax(-1), N_ROTATIONS).to(p.dtype)
            p = hard + p - p.detach()
        q = p @ table
        norm = q.norm(dim=-1, keepdim=True)
        # a mixture can cancel out; fall back to the most likely entry
        q = torch.where(norm > 1e-6, q / norm.clamp(min=1e-6), table[p.argmax(-1)])
        return q, p

    def forward(self, tokens: torch.Tensor, tau: float = 1.0, mode: str = "train", gumbel=None, rng=None) -> GaussianSet:
        z = self.channel_mlp(tokens)
        q, _ = self.rotnet(z, tau, mode, gumbel, rng)
        return GaussianSet(self.decode_position(z), self.decode_scale(z), self.decode_color(z),
                           self.decode_opacity(z), q, self.mode)


def decode_gaussians(seq, params: Decoder, tau: float = 1.0, mode: str = "train", gumbel=None, rng=None) -> GaussianSet:
    """One Gaussian per token of a :class:`~mvgamba.tokenizer.TokenSequence`."""
    return params(seq.tokens, tau, mode, gumbel, rng)
