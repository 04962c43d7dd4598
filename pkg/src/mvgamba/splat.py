"""Differentiable Gaussian splatting: EWA projection, depth-sorted alpha compositing,
a brute-force reference renderer, a tiled renderer, and splat/image file I/O.

Pixel coordinates are continuous ``(col, row)`` with pixel centers at ``i + 0.5``.
The contribution of splat i at a pixel is ``opacity_i * exp(-0.5 * d^T S'^-1 d)``,
zeroed outside the 3-sigma ellipse (Mahalanobis distance > 3).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np
import torch
from PIL import Image

from .decoder import GaussianSet
from .geometry import CameraView

BLUR = 0.3
EPS_DISK = 1e-6
MIN_RADIUS = 0.3
CUTOFF_SIGMA = 3.0
SH_C0 = 0.28209479177387814
WHITE = (1.0, 1.0, 1.0)


def quat_to_rotmat_t(q: torch.Tensor) -> torch.Tensor:
    q = q / q.norm(dim=-1, keepdim=True)
    w, x, y, z = q.unbind(-1)
    rows = [
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ]
    return torch.stack(rows, dim=-1).unflatten(-1, (3, 3))


@dataclass
class Projected:
    """Per-splat screen-space quantities; ``valid`` marks splats that survive culling."""

    mean2d: torch.Tensor  # (K, 2) col, row
    cov2d: torch.Tensor  # (K, 2, 2)
    conic: torch.Tensor  # (K, 3) inverse covariance entries a, b, c
    depth: torch.Tensor  # (K,) camera depth along the viewing axis
    radius: torch.Tensor  # (K,) pixels, 3 sigma of the major axis
    valid: torch.Tensor  # (K,) bool
    p_cam: torch.Tensor  # (K, 3)


def world_covariance(gs: GaussianSet) -> torch.Tensor:
    scales = gs.scales
    if gs.mode == "2d":
        scales = torch.cat([scales, scales.new_full(scales.shape[:-1] + (1,), EPS_DISK ** 0.5)], dim=-1)
    R = quat_to_rotmat_t(gs.quats)
    return (R * scales.pow(2).unsqueeze(-2)) @ R.transpose(-1, -2)


def project(gs: GaussianSet, view: CameraView, blur: float = BLUR) -> Projected:
    """EWA projection of every Gaussian into ``view``."""
    dtype = gs.means.dtype
    w2c = torch.as_tensor(view.world_to_camera(), dtype=dtype)
    Rw, tw = w2c[:3, :3], w2c[:3, 3]
    p_cam = gs.means @ Rw.T + tw
    x, y = p_cam[..., 0], p_cam[..., 1]
    depth = -p_cam[..., 2]
    f = view.focal
    cx, cy = view.principal_point
    safe = torch.where(depth.abs() > 1e-6, depth, torch.full_like(depth, 1e-6))
    mean2d = torch.stack([cx + f * x / safe, cy - f * y / safe], dim=-1)

    zero = torch.zeros_like(safe)
    J = torch.stack([
        torch.stack([f / safe, zero, f * x / safe ** 2], dim=-1),
        torch.stack([zero, -f / safe, -f * y / safe ** 2], dim=-1),
    ], dim=-2)
    cov_cam = Rw @ world_covariance(gs) @ Rw.T
    cov2d = J @ cov_cam @ J.transpose(-1, -2) + blur * torch.eye(2, dtype=dtype)

    a, b, c = cov2d[..., 0, 0], cov2d[..., 0, 1], cov2d[..., 1, 1]
    det = a * c - b * b
    conic = torch.stack([c / det, -b / det, a / det], dim=-1)
    mid = 0.5 * (a + c)
    lam = mid + torch.sqrt(torch.clamp(mid * mid - det, min=0.0))
    radius = CUTOFF_SIGMA * torch.sqrt(lam)
    valid = (depth > view.near) & (depth < view.far) & (radius >= MIN_RADIUS) & (det > 0)
    return Projected(mean2d, cov2d, conic, depth, radius, valid, p_cam)


@dataclass
class RenderOutput:
    rgb: torch.Tensor  # (H, W, 3)
    alpha: torch.Tensor  # (H, W)
    depth: torch.Tensor  # (H, W), not differentiable
    normal: torch.Tensor | None = None  # (H, W, 3) camera frame, disk mode only


def depth_order(depth: torch.Tensor) -> torch.Tensor:
    """Front-to-back order; exact depth ties keep the original index order."""
    return torch.from_numpy(np.argsort(depth.detach().cpu().numpy(), kind="stable"))


def _pixel_centers(view: CameraView, dtype) -> torch.Tensor:
    rows, cols = torch.meshgrid(torch.arange(view.height, dtype=dtype) + 0.5,
                                torch.arange(view.width, dtype=dtype) + 0.5, indexing="ij")
    return torch.stack([cols, rows], dim=-1).reshape(-1, 2)


def _camera_normals(gs: GaussianSet, view: CameraView, proj: Projected) -> torch.Tensor:
    Rw = torch.as_tensor(view.world_to_camera()[:3, :3], dtype=gs.means.dtype)
    n = quat_to_rotmat_t(gs.quats)[..., :, 2] @ Rw.T
    facing = (n * proj.p_cam).sum(-1, keepdim=True) > 0
    return torch.where(facing, -n, n)


def _composite(pix, mean2d, conic, opac, feats, depth, valid, background, far):
    """Composite pre-sorted splats for pixel batches.

    Shapes: ``pix`` (G, P, 2); per-splat tensors (G, K, ...); ``valid`` (G, K).
    Returns per-pixel features (G, P, F), alpha (G, P), median depth (G, P).
    """
    d = pix.unsqueeze(-2) - mean2d.unsqueeze(-3)  # (G, P, K, 2)
    dx, dy = d[..., 0], d[..., 1]
    a, b, c = (conic[..., i].unsqueeze(-2) for i in range(3))
    power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy
    inside = (power >= -0.5 * CUTOFF_SIGMA ** 2) & valid.unsqueeze(-2)
    w = torch.where(inside, opac.unsqueeze(-2) * torch.exp(torch.where(inside, power, torch.zeros_like(power))),
                    torch.zeros_like(power))
    trans_incl = torch.cumprod(1.0 - w, dim=-1)
    trans_excl = torch.cat([torch.ones_like(trans_incl[..., :1]), trans_incl[..., :-1]], dim=-1)
    contrib = w * trans_excl
    out = contrib @ feats
    final_t = trans_incl[..., -1] if trans_incl.shape[-1] else torch.ones(pix.shape[:-1], dtype=pix.dtype)
    if background is not None:
        out = out + final_t.unsqueeze(-1) * background
    with torch.no_grad():
        if trans_incl.shape[-1]:
            crossed = trans_incl <= 0.5
            first = crossed.to(torch.int8).argmax(-1)
            d_sorted = depth.unsqueeze(-2).expand_as(crossed)
            med = torch.gather(d_sorted, -1, first.unsqueeze(-1)).squeeze(-1)
            med = torch.where(crossed.any(-1), med, torch.full_like(med, far))
        else:
            med = torch.full(pix.shape[:-1], far, dtype=pix.dtype)
    return out, 1.0 - final_t, med


def _features(gs: GaussianSet, view: CameraView, proj: Projected, with_normals: bool):
    feats = gs.colors
    if with_normals:
        feats = torch.cat([feats, _camera_normals(gs, view, proj)], dim=-1)
    return feats


def _finish(out, alpha, med, view, with_normals) -> RenderOutput:
    H, W = view.height, view.width
    rgb = out[..., :3].reshape(H, W, 3)
    normal = None
    if with_normals:
        n = out[..., 3:6].reshape(H, W, 3)
        normal = n / torch.clamp(n.norm(dim=-1, keepdim=True), min=1e-12)
    return RenderOutput(rgb, alpha.reshape(H, W), med.reshape(H, W), normal)


def _background(background, dtype, with_normals):
    bg = torch.as_tensor(background, dtype=dtype)
    if with_normals:
        bg = torch.cat([bg, torch.zeros(3, dtype=dtype)])
    return bg


def render_reference(gs: GaussianSet, view: CameraView, background=WHITE, normals: bool | None = None) -> RenderOutput:
    """Exhaustive renderer: every pixel composites every splat in depth order."""
    with_normals = gs.mode == "2d" if normals is None else normals
    dtype = gs.means.dtype
    proj = project(gs, view)
    order = depth_order(proj.depth)
    feats = _features(gs, view, proj, with_normals)[order]
    bg = _background(background, dtype, with_normals)
    pix = _pixel_centers(view, dtype).unsqueeze(0)
    out, alpha, med = _composite(pix, proj.mean2d[order][None], proj.conic[order][None], gs.opacities[order][None],
                                 feats[None], proj.depth.detach()[order][None], proj.valid[order][None], bg, view.far)
    return _finish(out[0], alpha[0], med[0], view, with_normals)


def tile_bins(proj: Projected, view: CameraView, tile_size: int):
    """Bin splats into screen tiles.

    Returns ``(index, counts, origins)``: per tile, the first ``counts[t]`` entries
    of ``index[t]`` are the overlapping valid splats in front-to-back order;
    ``origins`` holds each tile's top-left (row, col) pixel.
    """
    H, W = view.height, view.width
    ty, tx = -(-H // tile_size), -(-W // tile_size)
    origins = np.array([(r * tile_size, c * tile_size) for r in range(ty) for c in range(tx)], dtype=np.int64)
    mean = proj.mean2d.detach().cpu().numpy().astype(np.float64)
    rad = proj.radius.detach().cpu().numpy().astype(np.float64)
    valid = proj.valid.detach().cpu().numpy()
    K = mean.shape[0]
    if K == 0:
        return np.zeros((len(origins), 1), dtype=np.int64), np.zeros(len(origins), dtype=np.int64), origins
    order = depth_order(proj.depth).numpy()
    # bounding box of the cutoff ellipse against the span of pixel centers in each tile
    lo_c, hi_c = origins[:, 1:2] + 0.5, np.minimum(origins[:, 1:2] + tile_size, W) - 0.5
    lo_r, hi_r = origins[:, 0:1] + 0.5, np.minimum(origins[:, 0:1] + tile_size, H) - 0.5
    m = mean[order]
    r = rad[order] + 1e-6
    hit = ((m[None, :, 0] + r >= lo_c) & (m[None, :, 0] - r <= hi_c)
           & (m[None, :, 1] + r >= lo_r) & (m[None, :, 1] - r <= hi_r) & valid[order][None])
    counts = hit.sum(1)
    kmax = max(int(counts.max()), 1)
    rank = np.where(hit, np.arange(K)[None], K + np.arange(K)[None])
    pick = np.argsort(rank, axis=1, kind="stable")[:, :kmax]
    return np.ascontiguousarray(order[pick]), counts.astype(np.int64), origins


@numba.njit(cache=True)
def _raster_forward(mean2d, conic, opac, feats, bg, depth, index, counts, origins, H, W, ts, far,
                    out, alpha, med, n_used):
    n_feat = feats.shape[1]
    cutoff = -0.5 * CUTOFF_SIGMA * CUTOFF_SIGMA
    for t in range(index.shape[0]):
        for lr in range(ts):
            row = origins[t, 0] + lr
            if row >= H:
                continue
            for lc in range(ts):
                col = origins[t, 1] + lc
                if col >= W:
                    continue
                pix = row * W + col
                px, py = col + 0.5, row + 0.5
                T = 1.0
                md = far
                found = False
                last = 0
                for j in range(counts[t]):
                    k = index[t, j]
                    dx = px - mean2d[k, 0]
                    dy = py - mean2d[k, 1]
                    power = -0.5 * (conic[k, 0] * dx * dx + conic[k, 2] * dy * dy) - conic[k, 1] * dx * dy
                    if power < cutoff:
                        continue
                    w = opac[k] * math.exp(power)
                    for f in range(n_feat):
                        out[pix, f] += feats[k, f] * w * T
                    T *= 1.0 - w
                    last = j + 1
                    if not found and T <= 0.5:
                        md = depth[k]
                        found = True
                for f in range(n_feat):
                    out[pix, f] += bg[f] * T
                alpha[pix] = 1.0 - T
                med[pix] = md
                n_used[pix] = last


@numba.njit(cache=True)
def _raster_backward(mean2d, conic, opac, feats, bg, index, counts, origins, H, W, ts, n_used,
                     g_out, g_alpha, g_mean2d, g_conic, g_opac, g_feats, g_bg):
    n_feat = feats.shape[1]
    cutoff = -0.5 * CUTOFF_SIGMA * CUTOFF_SIGMA
    kmax = index.shape[1]
    trans = np.empty(kmax)
    weights = np.empty(kmax)
    powers = np.empty(kmax)
    resid = np.empty(n_feat)
    for t in range(index.shape[0]):
        for lr in range(ts):
            row = origins[t, 0] + lr
            if row >= H:
                continue
            for lc in range(ts):
                col = origins[t, 1] + lc
                if col >= W:
                    continue
                pix = row * W + col
                px, py = col + 0.5, row + 0.5
                n = n_used[pix]
                # forward sweep: transmittance in front of each splat
                T = 1.0
                for j in range(n):
                    k = index[t, j]
                    dx = px - mean2d[k, 0]
                    dy = py - mean2d[k, 1]
                    power = -0.5 * (conic[k, 0] * dx * dx + conic[k, 2] * dy * dy) - conic[k, 1] * dx * dy
                    trans[j] = T
                    powers[j] = power
                    if power < cutoff:
                        weights[j] = 0.0
                        continue
                    w = opac[k] * math.exp(power)
                    weights[j] = w
                    T *= 1.0 - w
                for f in range(n_feat):
                    g_bg[f] += g_out[pix, f] * T
                    resid[f] = bg[f]
                resid_alpha = 0.0
                # reverse sweep: resid is what lies behind splat j, seen through nothing in between
                for j in range(n - 1, -1, -1):
                    w = weights[j]
                    if w == 0.0:
                        continue
                    k = index[t, j]
                    Tj = trans[j]
                    g_w = g_alpha[pix] * Tj * (1.0 - resid_alpha)
                    for f in range(n_feat):
                        g_w += g_out[pix, f] * Tj * (feats[k, f] - resid[f])
                        g_feats[k, f] += g_out[pix, f] * w * Tj
                    for f in range(n_feat):
                        resid[f] = feats[k, f] * w + (1.0 - w) * resid[f]
                    resid_alpha = w + (1.0 - w) * resid_alpha
                    e = w / opac[k]
                    g_opac[k] += g_w * e
                    g_pow = g_w * w
                    dx = px - mean2d[k, 0]
                    dy = py - mean2d[k, 1]
                    g_conic[k, 0] += -0.5 * dx * dx * g_pow
                    g_conic[k, 1] += -dx * dy * g_pow
                    g_conic[k, 2] += -0.5 * dy * dy * g_pow
                    g_mean2d[k, 0] += (conic[k, 0] * dx + conic[k, 1] * dy) * g_pow
                    g_mean2d[k, 1] += (conic[k, 1] * dx + conic[k, 2] * dy) * g_pow


class _Rasterize(torch.autograd.Function):
    @staticmethod
    def forward(ctx, mean2d, conic, opac, feats, bg, depth, bins, shape):
        index, counts, origins = bins
        H, W, ts, far = shape
        np_dtype = np.float64 if mean2d.dtype == torch.float64 else np.float32
        arr = lambda x: np.ascontiguousarray(x.detach().cpu().numpy().astype(np_dtype, copy=False))
        m, c, o, f, b, d = arr(mean2d), arr(conic), arr(opac), arr(feats), arr(bg), arr(depth)
        out = np.zeros((H * W, f.shape[1]), dtype=np_dtype)
        alpha = np.zeros(H * W, dtype=np_dtype)
        med = np.zeros(H * W, dtype=np_dtype)
        n_used = np.zeros(H * W, dtype=np.int64)
        _raster_forward(m, c, o, f, b, d, index, counts, origins, H, W, ts, far, out, alpha, med, n_used)
        ctx.saved = (m, c, o, f, b, index, counts, origins, H, W, ts, n_used)
        t = lambda x: torch.from_numpy(x).to(mean2d.dtype)
        med_t = t(med)
        ctx.mark_non_differentiable(med_t)
        return t(out), t(alpha), med_t

    @staticmethod
    def backward(ctx, g_out, g_alpha, _g_med):
        m, c, o, f, b, index, counts, origins, H, W, ts, n_used = ctx.saved
        np_dtype = m.dtype
        arr = lambda x, shape: (np.zeros(shape, dtype=np_dtype) if x is None
                                else np.ascontiguousarray(x.detach().cpu().numpy().astype(np_dtype, copy=False)))
        go, ga = arr(g_out, (H * W, f.shape[1])), arr(g_alpha, (H * W,))
        g_m, g_c, g_o = np.zeros_like(m), np.zeros_like(c), np.zeros_like(o)
        g_f, g_b = np.zeros_like(f), np.zeros_like(b)
        _raster_backward(m, c, o, f, b, index, counts, origins, H, W, ts, n_used, go, ga, g_m, g_c, g_o, g_f, g_b)
        dtype = g_out.dtype if g_out is not None else g_alpha.dtype
        t = lambda x: torch.from_numpy(x).to(dtype)
        return t(g_m), t(g_c), t(g_o), t(g_f), t(g_b), None, None, None


def render_tiled(gs: GaussianSet, view: CameraView, background=WHITE, tile_size: int = 8,
                 normals: bool | None = None) -> RenderOutput:
    """Tile-binned renderer with the same contract as :func:`render_reference`.

    Compositing runs in a compiled per-pixel kernel with a hand-written backward
    pass; gradients reach the projection through autograd.
    """
    with_normals = gs.mode == "2d" if normals is None else normals
    dtype = gs.means.dtype
    proj = project(gs, view)
    feats = _features(gs, view, proj, with_normals)
    bg = _background(background, dtype, with_normals)
    bins = tile_bins(proj, view, tile_size)
    out, alpha, med = _Rasterize.apply(proj.mean2d.contiguous(), proj.conic.contiguous(), gs.opacities.contiguous(),
                                       feats.contiguous(), bg, proj.depth.detach(), bins,
                                       (view.height, view.width, tile_size, float(view.far)))
    return _finish(out, alpha, med, view, with_normals)


def render(gs: GaussianSet, view: CameraView, background=WHITE, tile_size: int | None = 8, normals=None) -> RenderOutput:
    if tile_size is None:
        return render_reference(gs, view, background, normals)
    return render_tiled(gs, view, background, tile_size, normals)


def render_normals(gs: GaussianSet, view: CameraView, tile_size: int | None = 8) -> torch.Tensor:
    """Alpha-weighted, renormalized camera-frame disk normals, flipped toward the camera."""
    if gs.mode != "2d":
        raise ValueError("normal maps are only defined for 2D disk Gaussians")
    return render(gs, view, WHITE, tile_size, normals=True).normal


def render_backward(gs: GaussianSet, view: CameraView, grad_rgb: torch.Tensor, grad_alpha: torch.Tensor | None = None,
                    background=WHITE, tile_size: int | None = 8) -> dict[str, torch.Tensor]:
    """Gradients of ``<grad_rgb, rgb> + <grad_alpha, alpha>`` w.r.t. every Gaussian attribute and the background."""
    leaves = {name: getattr(gs, name).detach().clone().requires_grad_(True)
              for name in ("means", "scales", "colors", "opacities", "quats")}
    bg = torch.as_tensor(background, dtype=gs.means.dtype).clone().requires_grad_(True)
    g = GaussianSet(leaves["means"], leaves["scales"], leaves["colors"], leaves["opacities"], leaves["quats"], gs.mode)
    out = render(g, view, bg, tile_size, normals=False)
    total = (out.rgb * grad_rgb).sum()
    if grad_alpha is not None:
        total = total + (out.alpha * grad_alpha).sum()
    grads = torch.autograd.grad(total, list(leaves.values()) + [bg], allow_unused=True)
    names = list(leaves) + ["background"]
    tensors = list(leaves.values()) + [bg]
    return {n: torch.zeros_like(t) if gr is None else gr for n, t, gr in zip(names, tensors, grads)}


# ----------------------------------------------------------------------------- files

_PLY_FIELDS = ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2", "opacity",
               "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]


def save_ply(path, gs: GaussianSet) -> None:
    """Binary little-endian PLY in the layout standard splat viewers read."""
    g = gs.detach().to(torch.float64)
    K = g.count
    alpha = g.opacities.numpy().clip(1e-7, 1 - 1e-7)
    scales = g.scales.numpy()
    if g.mode == "2d":
        scales = np.concatenate([scales, np.full((K, 1), EPS_DISK ** 0.5)], axis=1)
    cols = np.concatenate([
        g.means.numpy(), np.zeros((K, 3)), (g.colors.numpy() - 0.5) / SH_C0,
        np.log(alpha / (1 - alpha))[:, None], np.log(scales), g.quats.numpy(),
    ], axis=1).astype("<f4")
    header = ["ply", "format binary_little_endian 1.0", f"comment mode {g.mode}", f"element vertex {K}"]
    header += [f"property float {name}" for name in _PLY_FIELDS]
    header.append("end_header")
    Path(path).write_bytes(("\n".join(header) + "\n").encode("ascii") + cols.tobytes())


def load_ply(path) -> GaussianSet:
    data = Path(path).read_bytes()
    end = data.index(b"end_header\n") + len(b"end_header\n")
    lines = data[:end].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in lines:
        raise ValueError(f"{path}: only binary little-endian PLY is supported")
    mode, count, names = "3d", 0, []
    for line in lines:
        parts = line.split()
        if parts[:2] == ["comment", "mode"]:
            mode = parts[2]
        elif parts[:2] == ["element", "vertex"]:
            count = int(parts[2])
        elif parts[:1] == ["property"]:
            if parts[1] != "float":
                raise ValueError(f"{path}: unsupported property type {parts[1]}")
            names.append(parts[2])
    arr = np.frombuffer(data, dtype="<f4", count=count * len(names), offset=end).reshape(count, len(names))
    col = {n: arr[:, i].astype(np.float64) for i, n in enumerate(names)}
    stack = lambda keys: torch.as_tensor(np.stack([col[k] for k in keys], axis=1), dtype=torch.get_default_dtype())
    scales = torch.exp(stack(["scale_0", "scale_1"] if mode == "2d" else ["scale_0", "scale_1", "scale_2"]))
    colors = stack(["f_dc_0", "f_dc_1", "f_dc_2"]) * SH_C0 + 0.5
    opac = torch.sigmoid(torch.as_tensor(col["opacity"], dtype=torch.get_default_dtype()))
    quats = stack(["rot_0", "rot_1", "rot_2", "rot_3"])
    quats = quats / quats.norm(dim=-1, keepdim=True)
    return GaussianSet(stack(["x", "y", "z"]), scales, colors, opac, quats, mode)


def save_png(path, rgb, alpha=None, background=WHITE) -> None:
    """8-bit PNG. With an alpha map the color is stored un-premultiplied (RGBA), so
    compositing over ``background`` gives back the rendered image."""
    rgb = np.asarray(rgb.detach().cpu() if isinstance(rgb, torch.Tensor) else rgb, dtype=np.float64)
    chans = [rgb]
    if alpha is not None:
        a = np.asarray(alpha.detach().cpu() if isinstance(alpha, torch.Tensor) else alpha, dtype=np.float64)
        straight = (rgb - np.asarray(background) * (1 - a[..., None])) / np.maximum(a[..., None], 1e-6)
        chans = [np.where(a[..., None] > 0, straight, 0.0), a[..., None]]
    img = np.round(np.clip(np.concatenate(chans, axis=-1), 0, 1) * 255).astype(np.uint8)
    Image.fromarray(img, "RGBA" if alpha is not None else "RGB").save(path)


def load_png(path, background=WHITE) -> tuple[np.ndarray, np.ndarray]:
    """Read an image as float RGB composited over ``background`` plus its alpha (ones if absent)."""
    img = np.asarray(Image.open(path).convert("RGBA"), dtype=np.float64) / 255.0
    rgb, alpha = img[..., :3], img[..., 3]
    rgb = rgb * alpha[..., None] + np.asarray(background) * (1 - alpha[..., None])
    return rgb, alpha
