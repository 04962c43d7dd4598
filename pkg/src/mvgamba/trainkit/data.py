"""Procedural Gaussian scenes, their multi-view renders, and input-view augmentations."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from scipy.ndimage import map_coordinates
from scipy.spatial.transform import Rotation

from ..decoder import GaussianSet
from ..geometry import CANONICAL_ROTATIONS, CameraView, sample_orbit_cameras
from ..splat import WHITE, render_reference

SCENE_BOUND = 0.6
SCALE_RANGE = (0.03, 0.12)
OPACITY_RANGE = (0.7, 1.0)
WARP_CAP_PX = 4.0
JITTER_ROT_DEG = 5.0
JITTER_POS = 0.05


def generate_scene(seed: int, k_gaussians: int = 64, mode: str = "3d") -> GaussianSet:
    """A connected blob of ``k_gaussians`` random Gaussians inside [-0.6, 0.6]^3.

    Each new center lies within two mean scales of an earlier one. Rotations are
    drawn from the canonical table so the decoder can express them exactly.
    """
    if k_gaussians < 1:
        raise ValueError("need at least one Gaussian")
    rng = np.random.default_rng(seed)
    n_scale = 3 if mode == "3d" else 2
    scales = rng.uniform(*SCALE_RANGE, size=(k_gaussians, n_scale))
    reach = 2.0 * scales.mean()
    centers = [rng.uniform(-0.2, 0.2, size=3)]
    while len(centers) < k_gaussians:
        anchor = centers[rng.integers(len(centers))]
        step = rng.normal(size=3)
        step *= rng.uniform(0.0, reach) / np.linalg.norm(step)
        cand = anchor + step
        if np.all(np.abs(cand) <= SCENE_BOUND):
            centers.append(cand)
    quats = CANONICAL_ROTATIONS[rng.integers(0, len(CANONICAL_ROTATIONS), size=k_gaussians)]
    dtype = torch.get_default_dtype()
    t = lambda a: torch.as_tensor(np.asarray(a), dtype=dtype)
    return GaussianSet(t(np.stack(centers)), t(scales), t(rng.uniform(0, 1, size=(k_gaussians, 3))),
                       t(rng.uniform(*OPACITY_RANGE, size=k_gaussians)), t(quats), mode)


@dataclass
class SceneSample:
    gaussians: GaussianSet
    input_views: list[CameraView]
    input_images: list[np.ndarray]  # (H, W, 3)
    input_alphas: list[np.ndarray]
    novel_views: list[CameraView]
    novel_images: list[np.ndarray]
    novel_alphas: list[np.ndarray]
    seed: int

    @property
    def supervision(self):
        """All supervised views (inputs first) with clean targets."""
        return (self.input_views + self.novel_views, self.input_images + self.novel_images,
                self.input_alphas + self.novel_alphas)


def render_targets(gs: GaussianSet, views: list[CameraView], background=WHITE):
    images, alphas = [], []
    with torch.no_grad():
        for v in views:
            out = render_reference(gs, v, background, normals=False)
            images.append(out.rgb.double().numpy())
            alphas.append(out.alpha.double().numpy())
    return images, alphas


def make_sample(scene_seed: int, camera_rng, k_gaussians: int = 64, n_novel: int = 6, image_size: int = 64,
                mode: str = "3d", gaussians: GaussianSet | None = None) -> SceneSample:
    gs = gaussians if gaussians is not None else generate_scene(scene_seed, k_gaussians, mode)
    views = sample_orbit_cameras(camera_rng, 4, n_novel, image_size, image_size)
    images, alphas = render_targets(gs, views)
    return SceneSample(gs, views[:4], images[:4], alphas[:4], views[4:], images[4:], alphas[4:], scene_seed)


def grid_distortion(image: np.ndarray, strength: float, rng: np.random.Generator, grid: int = 8) -> np.ndarray:
    """Smooth warp driven by a coarse grid of random offsets of at most ``strength * 4`` pixels."""
    if not 0.0 <= strength <= 1.0:
        raise ValueError(f"strength must lie in [0, 1], got {strength}")
    if strength == 0.0:
        return image.copy()
    field = warp_field(image.shape[:2], strength, rng, grid)
    H, W = image.shape[:2]
    rows, cols = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")
    coords = [rows + field[..., 0], cols + field[..., 1]]
    out = np.stack([map_coordinates(image[..., ch], coords, order=1, mode="nearest")
                    for ch in range(image.shape[-1])], axis=-1)
    return out.astype(image.dtype, copy=False)


def warp_field(shape, strength: float, rng: np.random.Generator, grid: int = 8) -> np.ndarray:
    """Per-pixel (d_row, d_col) displacement, bilinearly upsampled from a grid x grid lattice."""
    cap = strength * WARP_CAP_PX
    direction = rng.normal(size=(grid, grid, 2))
    direction /= np.linalg.norm(direction, axis=-1, keepdims=True)
    coarse = direction * rng.uniform(0.0, cap, size=(grid, grid, 1))
    H, W = shape
    rr = np.linspace(0, grid - 1, H)
    cc = np.linspace(0, grid - 1, W)
    r_idx, c_idx = np.meshgrid(rr, cc, indexing="ij")
    return np.stack([map_coordinates(coarse[..., k], [r_idx, c_idx], order=1) for k in range(2)], axis=-1)


def camera_jitter(view: CameraView, magnitude: float, rng: np.random.Generator) -> CameraView:
    """Perturb the pose by at most ``magnitude * 5`` degrees and ``magnitude * 0.05`` units."""
    if not 0.0 <= magnitude <= 1.0:
        raise ValueError(f"magnitude must lie in [0, 1], got {magnitude}")
    if magnitude == 0.0:
        return CameraView(view.camera_to_world.copy(), view.fov_y, view.width, view.height, view.near, view.far)
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = math.radians(rng.uniform(0.0, magnitude * JITTER_ROT_DEG))
    delta = Rotation.from_rotvec(axis * angle).as_matrix()
    shift = rng.normal(size=3)
    shift *= rng.uniform(0.0, magnitude * JITTER_POS) / np.linalg.norm(shift)
    c2w = view.camera_to_world.copy()
    u, _, vt = np.linalg.svd(delta @ c2w[:3, :3])
    c2w[:3, :3] = u @ vt
    c2w[:3, 3] = c2w[:3, 3] + shift
    return CameraView(c2w, view.fov_y, view.width, view.height, view.near, view.far)
