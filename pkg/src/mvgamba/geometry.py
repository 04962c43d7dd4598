"""Camera conventions, Plücker ray maps, quaternions and the canonical rotation table.

Conventions: right-handed world, y up. ``camera_to_world`` maps camera-frame
points to world points; the camera looks along its local -z axis with +y up
and +x to the right. Pixel ``(row, col)`` has its center at
``(row + 0.5, col + 0.5)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

ORBIT_RADIUS = 1.5
DEFAULT_FOV_Y = math.radians(60.0)
AZIMUTH_STEP_DEG = 15.0
ELEVATION_RANGE_DEG = (5.0, 30.0)


@dataclass
class CameraView:
    camera_to_world: np.ndarray
    fov_y: float
    width: int
    height: int
    near: float = 0.1
    far: float = 4.0

    def __post_init__(self):
        self.camera_to_world = np.asarray(self.camera_to_world, dtype=np.float64).reshape(4, 4)
        rot = self.rotation
        if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-6):
            raise ValueError("camera rotation is not orthonormal")
        if np.linalg.det(rot) < 0:
            raise ValueError("camera rotation has negative determinant")
        if not 0 < self.near < self.far:
            raise ValueError(f"need 0 < near < far, got {self.near}, {self.far}")
        if not 0 < self.fov_y < math.pi:
            raise ValueError(f"fov_y out of range: {self.fov_y}")

    @property
    def rotation(self) -> np.ndarray:
        return self.camera_to_world[:3, :3]

    @property
    def origin(self) -> np.ndarray:
        return self.camera_to_world[:3, 3]

    @property
    def focal(self) -> float:
        """Focal length in pixels (square pixels, shared by both axes)."""
        return 0.5 * self.height / math.tan(0.5 * self.fov_y)

    @property
    def principal_point(self) -> tuple[float, float]:
        return 0.5 * self.width, 0.5 * self.height

    def world_to_camera(self) -> np.ndarray:
        rot = self.rotation
        out = np.eye(4)
        out[:3, :3] = rot.T
        out[:3, 3] = -rot.T @ self.origin
        return out

    def with_size(self, width: int, height: int) -> "CameraView":
        return CameraView(self.camera_to_world.copy(), self.fov_y, width, height, self.near, self.far)


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0)) -> np.ndarray:
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    z_axis = -forward
    x_axis = np.cross(np.asarray(up, dtype=np.float64), z_axis)
    norm = np.linalg.norm(x_axis)
    if norm < 1e-9:
        # looking straight along up; pick any perpendicular
        x_axis = np.cross(np.array([0.0, 0.0, 1.0]), z_axis)
        norm = np.linalg.norm(x_axis)
    x_axis /= norm
    y_axis = np.cross(z_axis, x_axis)
    c2w = np.eye(4)
    c2w[:3, 0], c2w[:3, 1], c2w[:3, 2], c2w[:3, 3] = x_axis, y_axis, z_axis, eye
    return c2w


def orbit_camera(elevation_deg: float, azimuth_deg: float, radius: float = ORBIT_RADIUS,
                 width: int = 64, height: int = 64, fov_y: float = DEFAULT_FOV_Y) -> CameraView:
    """Camera on a sphere around the origin; azimuth 0 sits on +z, positive elevation is above."""
    el, az = math.radians(elevation_deg), math.radians(azimuth_deg)
    eye = radius * np.array([math.cos(el) * math.sin(az), math.sin(el), math.cos(el) * math.cos(az)])
    return CameraView(look_at(eye), fov_y, width, height)


def pixel_directions_camera(view: CameraView) -> np.ndarray:
    """Unnormalized camera-frame ray directions, shape (H, W, 3), z = -1."""
    cx, cy = view.principal_point
    f = view.focal
    rows, cols = np.meshgrid(np.arange(view.height) + 0.5, np.arange(view.width) + 0.5, indexing="ij")
    x = (cols - cx) / f
    y = -(rows - cy) / f
    return np.stack([x, y, -np.ones_like(x)], axis=-1)


def pluecker_rays(view: CameraView) -> np.ndarray:
    """Per-pixel Plücker coordinates ``(d, o x d)`` of shape (H, W, 6)."""
    dirs = pixel_directions_camera(view) @ view.rotation.T
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    moment = np.cross(np.broadcast_to(view.origin, dirs.shape), dirs)
    return np.concatenate([dirs, moment], axis=-1)


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_to_rotmat(q) -> np.ndarray:
    """Rotation matrix of a unit quaternion ``(w, x, y, z)``; accepts a batch (..., 4)."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1)
    if np.any(np.abs(norm - 1.0) > 1e-3):
        raise ValueError(f"quaternion is not unit norm (|q| = {norm})")
    w, x, y, z = np.moveaxis(q / norm[..., None], -1, 0)
    rot = np.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], axis=-1)
    return rot.reshape(q.shape[:-1] + (3, 3))


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    return np.concatenate([[math.cos(angle / 2)], math.sin(angle / 2) * axis])


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    w1, x1, y1, z1 = a
    w2, x2, y2, z2 = b
    return np.array([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ])


_PRINCIPAL = [(1, 0, 0), (0, 1, 0), (0, 0, 1)]
_FACE_DIAGONALS = [(1, 1, 0), (1, -1, 0), (0, 1, 1), (0, 1, -1), (1, 0, 1), (1, 0, -1)]
_BODY_DIAGONALS = [(1, 1, 1), (-1, 1, 1)]


def build_canonical_rotations() -> np.ndarray:
    """The fixed (32, 4) table of canonical rotation quaternions; entry 0 is the identity.

    Layout: identity; 180 deg about x, y, z and the six face diagonals; +/-45 deg
    about x, y, z and the six face diagonals; +/-120 deg about two body diagonals.
    """
    table = [np.array([1.0, 0.0, 0.0, 0.0])]
    for axis in _PRINCIPAL + _FACE_DIAGONALS:
        table.append(quat_from_axis_angle(axis, math.pi))
    for axis in _PRINCIPAL + _FACE_DIAGONALS:
        for sign in (1, -1):
            table.append(quat_from_axis_angle(axis, sign * math.pi / 4))
    for axis in _BODY_DIAGONALS:
        for sign in (1, -1):
            table.append(quat_from_axis_angle(axis, sign * 2 * math.pi / 3))
    out = np.stack(table)
    assert out.shape == (32, 4)
    return out


CANONICAL_ROTATIONS = build_canonical_rotations()


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def sample_orbit_cameras(seed, n_input: int = 4, n_novel: int = 6, width: int = 64, height: int = 64,
                         fov_y: float = DEFAULT_FOV_Y, radius: float = ORBIT_RADIUS) -> list[CameraView]:
    """Input views share an elevation and sit 90 deg apart in azimuth; novel views come from the orbit grid."""
    rng = _rng(seed)
    elevation = rng.uniform(*ELEVATION_RANGE_DEG)
    phi = AZIMUTH_STEP_DEG * rng.integers(0, 24)
    views = [orbit_camera(elevation, phi + 360.0 / n_input * k if n_input else 0.0, radius, width, height, fov_y)
             for k in range(n_input)]
    for _ in range(n_novel):
        el = rng.uniform(*ELEVATION_RANGE_DEG)
        az = AZIMUTH_STEP_DEG * rng.integers(0, 24)
        views.append(orbit_camera(el, az, radius, width, height, fov_y))
    return views


def view_to_dict(view: CameraView) -> dict:
    return {
        "camera_to_world": [float(v) for v in view.camera_to_world.reshape(-1)],
        "fov_y": math.degrees(view.fov_y),
        "width": int(view.width),
        "height": int(view.height),
        "near": float(view.near),
        "far": float(view.far),
    }


def view_from_dict(d: dict) -> CameraView:
    return CameraView(
        np.asarray(d["camera_to_world"], dtype=np.float64).reshape(4, 4),
        math.radians(float(d["fov_y"])),
        int(d["width"]),
        int(d["height"]),
        float(d.get("near", 0.1)),
        float(d.get("far", 4.0)),
    )


def save_cameras(path, views: list[CameraView]) -> None:
    Path(path).write_text(json.dumps({"views": [view_to_dict(v) for v in views]}, indent=2))


def load_cameras(path) -> list[CameraView]:
    doc = json.loads(Path(path).read_text())
    entries = doc["views"] if isinstance(doc, dict) else doc
    return [view_from_dict(d) for d in entries]
