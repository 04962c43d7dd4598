"""Fuse views with their ray maps, patchify, and expand into the cross-scan token sequence."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

N_DIRECTIONS = 4
FUSED_CHANNELS = 9


def fuse_view(image, raymap):
    """Concatenate RGB (H, W, 3) and Plücker rays (H, W, 6) into a (H, W, 9) map."""
    if image.shape[:-1] != raymap.shape[:-1] or image.shape[-1] != 3 or raymap.shape[-1] != 6:
        raise ValueError(f"cannot fuse image {tuple(image.shape)} with ray map {tuple(raymap.shape)}")
    if isinstance(image, torch.Tensor) or isinstance(raymap, torch.Tensor):
        return torch.cat([torch.as_tensor(image), torch.as_tensor(raymap, dtype=torch.as_tensor(image).dtype)], dim=-1)
    return np.concatenate([image, raymap], axis=-1)


def split_view(fused):
    return fused[..., :3], fused[..., 3:]


def patch_embed(fused: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None) -> torch.Tensor:
    """Non-overlapping p x p convolution: (..., H, W, 9) -> (..., H/p, W/p, C)."""
    p = weight.shape[-1]
    H, W = fused.shape[-3], fused.shape[-2]
    if H % p or W % p:
        raise ValueError(f"patch size {p} does not divide image size {H}x{W}")
    lead = fused.shape[:-3]
    x = fused.reshape(-1, H, W, fused.shape[-1]).permute(0, 3, 1, 2)
    out = F.conv2d(x, weight, bias, stride=p)
    return out.permute(0, 2, 3, 1).reshape(*lead, H // p, W // p, weight.shape[0])


@lru_cache(maxsize=32)
def scan_orders(h: int, w: int) -> np.ndarray:
    """Flat cell indices (row-major) for the four scan directions, shape (4, h*w).

    Directions: row-major, reversed row-major, column-major, reversed column-major.
    """
    grid = np.arange(h * w).reshape(h, w)
    row = grid.reshape(-1)
    col = grid.T.reshape(-1)
    out = np.stack([row, row[::-1], col, col[::-1]])
    out.flags.writeable = False
    return out


@dataclass
class TokenSequence:
    tokens: torch.Tensor  # (L, C) or (B, L, C)
    provenance: np.ndarray  # (L, 4) int: view, direction, row, col
    n_views: int
    h: int
    w: int

    @property
    def length(self) -> int:
        return self.provenance.shape[0]

    def with_tokens(self, tokens: torch.Tensor) -> "TokenSequence":
        return TokenSequence(tokens, self.provenance, self.n_views, self.h, self.w)


@lru_cache(maxsize=32)
def _scan_index(n_views: int, h: int, w: int) -> tuple[torch.Tensor, np.ndarray]:
    orders = scan_orders(h, w)
    hw = h * w
    index = np.concatenate([v * hw + orders[d] for v in range(n_views) for d in range(N_DIRECTIONS)])
    views = np.repeat(np.arange(n_views), N_DIRECTIONS * hw)
    dirs = np.tile(np.repeat(np.arange(N_DIRECTIONS), hw), n_views)
    cells = index % hw
    prov = np.stack([views, dirs, cells // w, cells % w], axis=1)
    prov.flags.writeable = False
    return torch.from_numpy(index), prov


def sequence_length(n_views: int, height: int, width: int, patch: int) -> int:
    return N_DIRECTIONS * n_views * (height // patch) * (width // patch)


def cross_scan(grids: torch.Tensor) -> TokenSequence:
    """Expand view grids (..., N, h, w, C) into a view-major sequence (..., 4Nhw, C)."""
    n, h, w, c = grids.shape[-4:]
    index, prov = _scan_index(n, h, w)
    flat = grids.reshape(*grids.shape[:-4], n * h * w, c)
    tokens = flat.index_select(-2, index)
    return TokenSequence(tokens, prov, n, h, w)


def check_provenance(seq: TokenSequence) -> None:
    prov = np.asarray(seq.provenance)
    expected = seq.n_views * N_DIRECTIONS * seq.h * seq.w
    if prov.shape != (expected, 4):
        raise ValueError(f"provenance has shape {prov.shape}, expected ({expected}, 4)")
    v, d, r, c = prov.T
    if (v.min() < 0 or v.max() >= seq.n_views or d.min() < 0 or d.max() >= N_DIRECTIONS
            or r.min() < 0 or r.max() >= seq.h or c.min() < 0 or c.max() >= seq.w):
        raise ValueError("provenance entry out of range")
    key = ((v * N_DIRECTIONS + d) * seq.h + r) * seq.w + c
    if np.unique(key).size != expected:
        raise ValueError("provenance is not a bijection onto views x directions x cells")


def inverse_scan(seq: TokenSequence) -> torch.Tensor:
    """Average the four directional copies of every cell back into (..., N, h, w, C) grids."""
    check_provenance(seq)
    prov = np.asarray(seq.provenance)
    hw = seq.h * seq.w
    target = torch.from_numpy(prov[:, 0] * hw + prov[:, 2] * seq.w + prov[:, 3])
    tokens = seq.tokens
    out = tokens.new_zeros(*tokens.shape[:-2], seq.n_views * hw, tokens.shape[-1])
    out = out.index_add(-2, target, tokens) / N_DIRECTIONS
    return out.reshape(*tokens.shape[:-2], seq.n_views, seq.h, seq.w, tokens.shape[-1])


def add_positional(seq: TokenSequence, embedding: torch.Tensor) -> TokenSequence:
    if embedding.shape[-2:] != seq.tokens.shape[-2:]:
        raise ValueError(f"positional embedding {tuple(embedding.shape)} does not match tokens {tuple(seq.tokens.shape)}")
    return seq.with_tokens(seq.tokens + embedding)


class Tokenizer(nn.Module):
    """Patch convolution over fused 9-channel views plus a full-length learnable positional table."""

    def __init__(self, dim: int, patch: int, n_views: int, height: int, width: int):
        super().__init__()
        if height % patch or width % patch:
            raise ValueError(f"patch size {patch} does not divide image size {height}x{width}")
        self.patch = patch
        self.weight = nn.Parameter(torch.randn(dim, FUSED_CHANNELS, patch, patch) * 0.02)
        self.bias = nn.Parameter(torch.zeros(dim))
        self.pos_embed = nn.Parameter(torch.randn(sequence_length(n_views, height, width, patch), dim) * 0.02)

    def forward(self, fused: torch.Tensor) -> TokenSequence:
        """``fused``: (..., N, H, W, 9)."""
        grids = patch_embed(fused, self.weight, self.bias)
        return add_positional(cross_scan(grids), self.pos_embed)
