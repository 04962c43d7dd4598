"""Differentiation substrate: precision modes, AdamW, schedules, clipping, gradient checks,
checkpoints and a counter-based RNG.

Reverse-mode differentiation itself is delegated to torch autograd; everything
on top of it (optimizer, clipping, finite-difference verification, checkpoint
format) lives here.
"""

from __future__ import annotations

import contextlib
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np
import torch

CHECKPOINT_MAGIC = b"MVGB"
CHECKPOINT_VERSION = 1


@contextlib.contextmanager
def precision(mode: str = "verify"):
    """Temporarily switch torch's default dtype: ``"verify"`` is float64, ``"train"`` float32."""
    dtype = {"verify": torch.float64, "train": torch.float32}[mode]
    old = torch.get_default_dtype()
    torch.set_default_dtype(dtype)
    try:
        yield dtype
    finally:
        torch.set_default_dtype(old)


def backward(loss: torch.Tensor) -> None:
    if loss.numel() != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    loss.reshape(()).backward()


# ----------------------------------------------------------------------------- optimizer


@dataclass
class AdamWState:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.95)
    eps: float = 1e-8
    weight_decay: float = 0.05
    t: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)


class NonFiniteGradient(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient in parameter {name!r}")
        self.name = name


@torch.no_grad()
def adamw_step(params: Mapping[str, torch.Tensor], state: AdamWState) -> None:
    """One AdamW update with decoupled weight decay and bias-corrected moments.

    All gradients are validated before any parameter moves, so a NaN aborts the
    whole step. Parameters without a gradient are skipped.
    """
    for name, p in params.items():
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise NonFiniteGradient(name)
    state.t += 1
    b1, b2 = state.betas
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        if p.grad is None:
            continue
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = torch.zeros_like(p)
            state.v[name] = torch.zeros_like(p)
        v = state.v[name]
        m.mul_(b1).add_(g, alpha=1 - b1)
        v.mul_(b2).addcmul_(g, g, value=1 - b2)
        if state.weight_decay:
            p.mul_(1 - state.lr * state.weight_decay)
        denom = (v / bc2).sqrt_().add_(state.eps)
        p.addcdiv_(m, denom, value=-state.lr / bc1)


def lr_at(epoch: float, total_epochs: float, warmup_epochs: float, peak: float = 1e-3, floor: float = 1e-5) -> float:
    """Linear warm-up from 0 to ``peak``, then cosine decay from ``peak`` to ``floor``."""
    if warmup_epochs > 0 and epoch < warmup_epochs:
        return peak * epoch / warmup_epochs
    span = total_epochs - warmup_epochs
    if span <= 0:
        return peak
    frac = min(max((epoch - warmup_epochs) / span, 0.0), 1.0)
    return floor + 0.5 * (peak - floor) * (1.0 + math.cos(math.pi * frac))


@torch.no_grad()
def clip_grad_norm(params: Iterable[torch.Tensor], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``; returns the norm before clipping."""
    grads = [p.grad for p in params if p.grad is not None]
    if not grads:
        return 0.0
    # fixed summation order keeps the norm reproducible
    total = math.sqrt(sum(float(g.double().pow(2).sum()) for g in grads))
    if total > max_norm:
        scale = max_norm / total
        for g in grads:
            g.mul_(scale)
    return total


# ----------------------------------------------------------------------------- gradient checks


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    n_checked: int
    failures: list[tuple[int, int, float, float]]  # (input index, flat coord, analytic, numeric)

    @property
    def ok(self) -> bool:
        return self.max_rel_error < self.tolerance


def grad_check(fn: Callable[..., torch.Tensor], inputs, tolerance: float = 1e-4, step: float = 1e-5,
               weights_seed: int = 0, max_coords: int | None = None) -> GradCheckReport:
    """Compare autograd gradients of ``fn`` against central finite differences.

    ``fn`` may return any shape; non-scalar outputs are contracted with a fixed
    random weight tensor. The per-coordinate error is
    ``|a - n| / max(|a|, |n|, 1e-3 * max|n|)``, so coordinates that are tiny
    relative to the whole gradient do not dominate. Inputs are promoted to
    float64. Failures are collected, never raised.
    """
    if isinstance(inputs, torch.Tensor):
        inputs = (inputs,)
    xs = [x.detach().to(torch.float64).clone().requires_grad_(True) for x in inputs]

    out = fn(*xs)
    weights = None
    if out.numel() != 1:
        gen = torch.Generator().manual_seed(weights_seed)
        weights = torch.rand(out.shape, generator=gen, dtype=torch.float64) + 0.5

    def scalar(*args):
        y = fn(*args)
        return y.sum() if weights is None else (y * weights).sum()

    loss = scalar(*xs)
    analytic = torch.autograd.grad(loss, xs, allow_unused=True)
    analytic = [torch.zeros_like(x) if g is None else g for x, g in zip(xs, analytic)]

    numeric = []
    with torch.no_grad():
        for i, x in enumerate(xs):
            flat = x.view(-1)
            num = torch.zeros_like(flat)
            coords = range(flat.numel()) if max_coords is None else range(min(max_coords, flat.numel()))
            for j in coords:
                orig = flat[j].item()
                flat[j] = orig + step
                fp = scalar(*xs).item()
                flat[j] = orig - step
                fm = scalar(*xs).item()
                flat[j] = orig
                num[j] = (fp - fm) / (2 * step)
            numeric.append(num)

    scale = max((float(n.abs().max()) for n in numeric if n.numel()), default=0.0)
    floor = max(1e-3 * scale, 1e-12)
    worst, failures, count = 0.0, [], 0
    for i, (a, n) in enumerate(zip(analytic, numeric)):
        a = a.reshape(-1)
        n_coords = n.numel() if max_coords is None else min(max_coords, n.numel())
        for j in range(n_coords):
            av, nv = float(a[j]), float(n[j])
            err = abs(av - nv) / max(abs(av), abs(nv), floor)
            count += 1
            worst = max(worst, err)
            if err >= tolerance:
                failures.append((i, j, av, nv))
    return GradCheckReport(worst, tolerance, count, failures)


# ----------------------------------------------------------------------------- checkpoints


def save_checkpoint(path, tensors: Mapping[str, object]) -> None:
    """Write named tensors in the little-endian MVGB container (data stored as float32)."""
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(tensors))]
    for name, value in tensors.items():
        if isinstance(value, torch.Tensor):
            value = value.detach().cpu().numpy()
        arr = np.array(value, dtype="<f4", order="C")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not an MVGB checkpoint")
    version, count = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    offset = 12
    out = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", data, offset)
        offset += 4
        name = data[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack_from("<I", data, offset)
        offset += 4
        dims = struct.unpack_from(f"<{ndim}I", data, offset)
        offset += 4 * ndim
        n = int(np.prod(dims)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=offset).reshape(dims).copy()
        offset += 4 * n
        out[name] = arr
    return out


def optimizer_tensors(state: AdamWState) -> dict[str, np.ndarray]:
    out = {"opt/t": np.float32(state.t)}
    for name in state.m:
        out[f"opt/m/{name}"] = state.m[name]
        out[f"opt/v/{name}"] = state.v[name]
    return out


def restore_optimizer(state: AdamWState, tensors: Mapping[str, np.ndarray]) -> None:
    state.t = int(np.asarray(tensors.get("opt/t", 0)).reshape(-1)[0])
    state.m.clear()
    state.v.clear()
    for key, arr in tensors.items():
        if key.startswith("opt/m/"):
            state.m[key[6:]] = torch.from_numpy(np.array(arr, dtype=np.float32))
        elif key.startswith("opt/v/"):
            state.v[key[6:]] = torch.from_numpy(np.array(arr, dtype=np.float32))


# ----------------------------------------------------------------------------- rng


def rng_for(seed: int, stream: str, *index: int) -> np.random.Generator:
    """Counter-based generator keyed by ``(seed, stream, index...)``; independent of call order."""
    key = [int(seed) & 0xFFFFFFFF, zlib.crc32(stream.encode("utf-8"))] + [int(i) & 0xFFFFFFFF for i in index]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))
