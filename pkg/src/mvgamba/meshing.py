"""TSDF fusion of rendered median-depth maps and iso-surface extraction."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.ndimage import map_coordinates
from skimage import measure

from .decoder import GaussianSet
from .geometry import CameraView, orbit_camera
from .splat import render

BOUND = 1.0


@dataclass
class TsdfVolume:
    resolution: int
    trunc: float
    tsdf: np.ndarray = field(default=None, repr=False)
    weight: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        shape = (self.resolution,) * 3
        if self.tsdf is None:
            self.tsdf = np.full(shape, self.trunc, dtype=np.float64)
        if self.weight is None:
            self.weight = np.zeros(shape, dtype=np.float64)

    @classmethod
    def empty(cls, resolution: int = 64, trunc_voxels: float = 4.0) -> "TsdfVolume":
        return cls(resolution, trunc_voxels * 2 * BOUND / resolution)

    @property
    def voxel_size(self) -> float:
        return 2 * BOUND / self.resolution

    def centers(self) -> np.ndarray:
        """World coordinates of voxel centers, shape (R, R, R, 3), indexed [x, y, z]."""
        ax = -BOUND + (np.arange(self.resolution) + 0.5) * self.voxel_size
        return np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), axis=-1)

    def sample(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Trilinear signed distance and weight at world points (M, 3)."""
        idx = (np.asarray(points) + BOUND) / self.voxel_size - 0.5
        coords = idx.T
        d = map_coordinates(self.tsdf, coords, order=1, mode="nearest")
        w = map_coordinates(self.weight, coords, order=1, mode="nearest")
        return d, w

    def copy(self) -> "TsdfVolume":
        return TsdfVolume(self.resolution, self.trunc, self.tsdf.copy(), self.weight.copy())


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (V, 3)
    faces: np.ndarray  # (F, 3) int

    @classmethod
    def empty(cls) -> "TriangleMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    def save_obj(self, path) -> None:
        lines = [f"v {x:.6f} {y:.6f} {z:.6f}" for x, y, z in self.vertices]
        lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in self.faces]
        Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def tsdf_integrate(volume: TsdfVolume, depth_map, view: CameraView) -> TsdfVolume:
    """Fuse one depth map in place (and return the volume).

    Pixels at or beyond the far plane carry no surface and are ignored; voxels
    more than one truncation distance behind the observed surface are skipped.
    """
    depth = np.asarray(depth_map.detach().cpu() if isinstance(depth_map, torch.Tensor) else depth_map,
                       dtype=np.float64)
    pts = volume.centers().reshape(-1, 3)
    w2c = view.world_to_camera()
    p_cam = pts @ w2c[:3, :3].T + w2c[:3, 3]
    z = -p_cam[:, 2]
    front = z > view.near
    safe = np.where(front, z, 1.0)
    cx, cy = view.principal_point
    col = np.floor(cx + view.focal * p_cam[:, 0] / safe).astype(np.int64)
    row = np.floor(cy - view.focal * p_cam[:, 1] / safe).astype(np.int64)
    inside = front & (col >= 0) & (col < view.width) & (row >= 0) & (row < view.height)
    obs = np.full(z.shape, np.inf)
    obs[inside] = depth[row[inside], col[inside]]
    sdf = obs - z
    use = inside & (obs < view.far) & (sdf >= -volume.trunc)
    sdf = np.minimum(sdf[use], volume.trunc)
    d = volume.tsdf.reshape(-1)
    w = volume.weight.reshape(-1)
    d[use] = (w[use] * d[use] + sdf) / (w[use] + 1.0)
    w[use] += 1.0
    return volume


def marching_cubes(volume: TsdfVolume, iso: float = 0.0) -> TriangleMesh:
    """Iso-surface over cells whose eight corners are all observed; world coordinates."""
    observed = volume.weight > 0
    cells = np.zeros_like(observed)
    o = observed
    cells[:-1, :-1, :-1] = (o[:-1, :-1, :-1] & o[1:, :-1, :-1] & o[:-1, 1:, :-1] & o[:-1, :-1, 1:]
                            & o[1:, 1:, :-1] & o[1:, :-1, 1:] & o[:-1, 1:, 1:] & o[1:, 1:, 1:])
    if not cells.any():
        return TriangleMesh.empty()
    vals = volume.tsdf[o]
    if not (vals.min() < iso < vals.max()):
        return TriangleMesh.empty()
    try:
        verts, faces, _, _ = measure.marching_cubes(volume.tsdf, iso)
    except (ValueError, RuntimeError):
        return TriangleMesh.empty()
    # Each triangle lies inside one cube; keep it only if that cube is fully observed.
    cube = np.clip(np.floor(verts[faces].mean(axis=1)).astype(np.int64), 0, volume.resolution - 2)
    faces = faces[cells[cube[:, 0], cube[:, 1], cube[:, 2]]]
    verts = -BOUND + (verts + 0.5) * volume.voxel_size
    if len(faces):
        tri = verts[faces]
        area = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
        faces = faces[area > 1e-12]
    used, faces = np.unique(faces, return_inverse=True)
    verts = verts[used]
    faces = faces.reshape(-1, 3)
    return TriangleMesh(verts.astype(np.float64), faces.astype(np.int64))


def extraction_views(n_views: int = 16, elevation: float = 15.0, image_size: int = 128) -> list[CameraView]:
    return [orbit_camera(elevation, 360.0 * i / n_views, width=image_size, height=image_size) for i in range(n_views)]


def extract_mesh(gs: GaussianSet, n_views: int = 16, resolution: int = 64, trunc_voxels: float = 4.0,
                 elevation: float = 15.0, image_size: int = 128) -> TriangleMesh:
    """Render median-depth maps around an orbit, fuse them, and extract the zero level set."""
    volume = TsdfVolume.empty(resolution, trunc_voxels)
    if n_views == 0:
        return TriangleMesh.empty()
    with torch.no_grad():
        for view in extraction_views(n_views, elevation, image_size):
            tsdf_integrate(volume, render(gs, view).depth, view)
    return marching_cubes(volume)
