"""Training objective: RGB and mask MSE, optional perceptual proxy, opacity regularizer."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import torch
import torch.nn.functional as F

PERCEPTUAL_SIZE = 256
PERCEPTUAL_IMPLS = ("off", "random-features")


@dataclass
class LossWeights:
    mask: float = 1.0
    perceptual: float = 0.6
    reg: float = 0.001

    def __post_init__(self):
        if min(self.mask, self.perceptual, self.reg) < 0:
            raise ValueError(f"loss weights must be nonnegative: {self}")


@dataclass
class LossReport:
    total: torch.Tensor
    rgb_mse: float
    mask_mse: float
    perceptual: float
    opacity_reg: float
    per_view: list[dict[str, float]] = field(default_factory=list)

    def reconstruct(self, weights: LossWeights) -> float:
        return self.rgb_mse + weights.mask * self.mask_mse + weights.perceptual * self.perceptual \
            + weights.reg * self.opacity_reg


def _check_shapes(pred, gt):
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(gt.shape)}")


def rgb_mse(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    _check_shapes(pred, gt)
    return (pred - gt).pow(2).mean()


def mask_mse(pred_alpha: torch.Tensor, gt_alpha: torch.Tensor) -> torch.Tensor:
    _check_shapes(pred_alpha, gt_alpha)
    return (pred_alpha - gt_alpha).pow(2).mean()


def opacity_reg(gs) -> torch.Tensor:
    """Mean of ``1 - alpha`` over a GaussianSet (or a bare opacity tensor); pushes primitives toward full opacity."""
    opacities = getattr(gs, "opacities", gs)
    return (1.0 - opacities).mean()


@lru_cache(maxsize=4)
def _random_filters(seed: int = 0) -> tuple[torch.Tensor, ...]:
    gen = torch.Generator().manual_seed(seed)
    shapes = [(8, 3, 3, 3), (16, 8, 3, 3), (32, 16, 3, 3)]
    return tuple(torch.randn(s, generator=gen, dtype=torch.float64) / (s[1] * 9) ** 0.5 for s in shapes)


def _features(img: torch.Tensor) -> list[torch.Tensor]:
    x = img.permute(2, 0, 1).unsqueeze(0)
    x = F.interpolate(x, size=(PERCEPTUAL_SIZE, PERCEPTUAL_SIZE), mode="bilinear", align_corners=False)
    feats = []
    for w in _random_filters():
        x = F.gelu(F.conv2d(x, w.to(x.dtype), padding=1))  # smooth, so finite differences stay meaningful
        feats.append(x)
        x = F.avg_pool2d(x, 2)
    return feats


def perceptual(pred: torch.Tensor, gt: torch.Tensor, impl: str = "off") -> torch.Tensor:
    """Perceptual distance between (H, W, 3) images.

    ``"random-features"`` compares multi-scale responses of a fixed, seeded random
    convolution stack after resizing both images to 256 x 256.
    """
    if impl not in PERCEPTUAL_IMPLS:
        raise ValueError(f"unknown perceptual implementation {impl!r}")
    _check_shapes(pred, gt)
    if impl == "off":
        return pred.new_zeros(())
    return sum((a - b).pow(2).mean() for a, b in zip(_features(pred), _features(gt)))


def composite_loss(renders, gts, gs, weights: LossWeights = LossWeights(),
                   impl: str = "off") -> LossReport:
    """View-averaged image terms plus the opacity regularizer.

    ``renders`` are objects with ``rgb``/``alpha``; ``gts`` are ``(rgb, alpha)`` pairs.
    """
    if not renders or len(renders) != len(gts):
        raise ValueError("need a nonempty, aligned list of renders and targets")
    view_totals, per_view = [], []
    sums = {"rgb_mse": 0.0, "mask_mse": 0.0, "perceptual": 0.0}
    for r, (gt_rgb, gt_alpha) in zip(renders, gts):
        l_rgb = rgb_mse(r.rgb, gt_rgb)
        l_mask = mask_mse(r.alpha, gt_alpha)
        l_perc = perceptual(r.rgb, gt_rgb, impl) if weights.perceptual else r.rgb.new_zeros(())
        view_totals.append(l_rgb + weights.mask * l_mask + weights.perceptual * l_perc)
        terms = {"rgb_mse": float(l_rgb.detach()), "mask_mse": float(l_mask.detach()),
                 "perceptual": float(l_perc.detach())}
        per_view.append(terms)
        for k, v in terms.items():
            sums[k] += v
    n = len(renders)
    reg = opacity_reg(gs)
    total = torch.stack(view_totals).mean() + weights.reg * reg
    return LossReport(total, sums["rgb_mse"] / n, sums["mask_mse"] / n, sums["perceptual"] / n,
                      float(reg.detach()), per_view)
