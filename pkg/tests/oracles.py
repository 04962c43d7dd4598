"""Slow, independent reference computations used by the test suite.

None of these import the code under test beyond plain data containers, so a
shared bug cannot make both sides agree.
"""

from __future__ import annotations

import numpy as np


# ----------------------------------------------------------------------------- selective scan


def scan_materialized(u, delta, A, B, C, D):
    """O(T^2) evaluation of the selective scan from its closed form.

    y_t = sum_{s<=t} C_t . (exp(A * sum_{r=s+1..t} delta_r) * delta_s * B_s * u_s) + D u_t

    Shapes: u, delta (T, E); A (E, N); B, C (T, N); D (E,). Float64 numpy.
    """
    u, delta, A, B, C, D = (np.asarray(x, dtype=np.float64) for x in (u, delta, A, B, C, D))
    T, E = u.shape
    csum = np.concatenate([np.zeros((1, E)), np.cumsum(delta, axis=0)])  # csum[t] = sum_{r<t} delta_r
    y = np.zeros((T, E))
    for t in range(T):
        for s in range(t + 1):
            decay = np.exp(A * (csum[t + 1] - csum[s + 1])[:, None])  # (E, N)
            contrib = decay * (delta[s] * u[s])[:, None] * B[s][None, :]
            y[t] += contrib @ C[t]
        y[t] += D * u[t]
    return y


# ----------------------------------------------------------------------------- splatting


def _rotmat(q):
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def pinhole(c2w, fov_y, width, height, p_world):
    """World point -> continuous (col, row) pixel coordinate and camera depth."""
    R, o = c2w[:3, :3], c2w[:3, 3]
    pc = R.T @ (np.asarray(p_world, dtype=np.float64) - o)
    f = 0.5 * height / np.tan(0.5 * fov_y)
    depth = -pc[2]
    return np.array([0.5 * width + f * pc[0] / depth, 0.5 * height - f * pc[1] / depth]), depth


def numeric_jacobian(fn, x, step=1e-6):
    x = np.asarray(x, dtype=np.float64)
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = step
        cols.append((np.asarray(fn(x + e)) - np.asarray(fn(x - e))) / (2 * step))
    return np.stack(cols, axis=-1)


def splat_cov2d(mean, scale, quat, c2w, fov_y, width, height, blur=0.3, disk_eps=1e-6):
    scale = np.asarray(scale, dtype=np.float64)
    if scale.size == 2:
        scale = np.append(scale, np.sqrt(disk_eps))
    R = _rotmat(quat)
    cov3 = R @ np.diag(scale ** 2) @ R.T
    J = numeric_jacobian(lambda p: pinhole(c2w, fov_y, width, height, p)[0], mean)
    return J @ cov3 @ J.T + blur * np.eye(2)


def naive_render(means, scales, quats, opacities, colors, c2w, fov_y, width, height, near=0.1, far=4.0,
                 background=(1.0, 1.0, 1.0), cutoff=3.0, min_radius=0.3):
    """Per-pixel loop over depth-sorted splats. Returns rgb (H, W, 3), alpha (H, W), median depth (H, W)."""
    K = len(means)
    items = []
    for i in range(K):
        m2, depth = pinhole(c2w, fov_y, width, height, means[i])
        if not near < depth < far:
            continue
        cov = splat_cov2d(means[i], scales[i], quats[i], c2w, fov_y, width, height)
        if 3.0 * np.sqrt(np.linalg.eigvalsh(cov).max()) < min_radius:
            continue
        items.append((depth, i, m2, np.linalg.inv(cov)))
    items.sort(key=lambda t: (t[0], t[1]))
    rgb = np.zeros((height, width, 3))
    alpha = np.zeros((height, width))
    med = np.full((height, width), far)
    for r in range(height):
        for c in range(width):
            p = np.array([c + 0.5, r + 0.5])
            T = 1.0
            acc = np.zeros(3)
            found = False
            for depth, i, m2, inv in items:
                d = p - m2
                maha = d @ inv @ d
                if maha > cutoff ** 2:
                    continue
                w = opacities[i] * np.exp(-0.5 * maha)
                acc += T * w * np.asarray(colors[i])
                T *= 1.0 - w
                if not found and T <= 0.5:
                    med[r, c] = depth
                    found = True
            rgb[r, c] = acc + T * np.asarray(background)
            alpha[r, c] = 1.0 - T
    return rgb, alpha, med
