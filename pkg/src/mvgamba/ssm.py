"""Selective state-space blocks over the expanded Gaussian token sequence, plus analytic FLOPs counts."""

from __future__ import annotations

import math

import numba
import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


SCAN_CHUNK = 256


@numba.njit(cache=True)
def _scan_chunk(decay, u, delta, B, C, D, h, h_all, y, t0, store):
    """Advance the state ``h`` (E, N) over one chunk whose factors exp(delta A) are precomputed."""
    T, E = u.shape
    N = h.shape[1]
    for t in range(T):
        for e in range(E):
            x = delta[t, e] * u[t, e]
            acc = D[e] * u[t, e]
            for n in range(N):
                hv = decay[t, e, n] * h[e, n] + x * B[t, n]
                h[e, n] = hv
                acc += C[t, n] * hv
            y[t, e] = acc
            if store:
                for n in range(N):
                    h_all[t0 + t, e, n] = h[e, n]


def _scan_forward(u, delta, A, B, C, D, h_all, y, store):
    # a vectorised in-place exp over a reused buffer is far cheaper than a scalar exp inside the kernel
    T, E = u.shape
    h = np.zeros((E, A.shape[1]), dtype=u.dtype)
    delta_t, A_t = torch.from_numpy(delta), torch.from_numpy(A)
    buf = torch.empty((min(T, SCAN_CHUNK), E, A.shape[1]), dtype=delta_t.dtype)
    for t0 in range(0, T, SCAN_CHUNK):
        t1 = min(T, t0 + SCAN_CHUNK)
        decay = buf[: t1 - t0]
        torch.mul(delta_t[t0:t1, :, None], A_t[None], out=decay)
        decay.exp_()
        _scan_chunk(decay.numpy(), u[t0:t1], delta[t0:t1], B[t0:t1], C[t0:t1], D, h, h_all, y[t0:t1], t0, store)


@numba.njit(cache=True)
def _scan_backward(u, delta, A, B, C, D, h_all, gy, gu, gdelta, gA, gB, gC, gD):
    T, E = u.shape
    N = A.shape[1]
    for e in range(E):
        for t in range(T):
            gD[e] += gy[t, e] * u[t, e]
            gu[t, e] += gy[t, e] * D[e]
        for n in range(N):
            a_en = A[e, n]
            gh = 0.0
            a_next = 0.0
            for t in range(T - 1, -1, -1):
                h_t = h_all[t, e, n]
                gC[t, n] += gy[t, e] * h_t
                gh = gy[t, e] * C[t, n] + a_next * gh
                dt = delta[t, e]
                a_t = math.exp(dt * a_en)
                h_prev = h_all[t - 1, e, n] if t > 0 else 0.0
                ga = gh * h_prev * a_t
                gdelta[t, e] += ga * a_en + gh * B[t, n] * u[t, e]
                gA[e, n] += ga * dt
                gB[t, n] += gh * dt * u[t, e]
                gu[t, e] += gh * dt * B[t, n]
                a_next = a_t


class _SelectiveScan(torch.autograd.Function):
    @staticmethod
    def forward(ctx, u, delta, A, B, C, D):
        lead = u.shape[:-2]
        T, E = u.shape[-2:]
        N = A.shape[-1]
        dtype = u.dtype
        np_dtype = np.float64 if dtype == torch.float64 else np.float32
        un = u.detach().reshape(-1, T, E).numpy().astype(np_dtype, copy=False)
        dn = delta.detach().reshape(-1, T, E).numpy().astype(np_dtype, copy=False)
        Bn = B.detach().reshape(-1, T, N).numpy().astype(np_dtype, copy=False)
        Cn = C.detach().reshape(-1, T, N).numpy().astype(np_dtype, copy=False)
        An = A.detach().numpy().astype(np_dtype, copy=False)
        Dn = D.detach().numpy().astype(np_dtype, copy=False)
        batch = un.shape[0]
        store = any(ctx.needs_input_grad)  # hidden states are only kept for the backward pass
        h_all = np.zeros((batch, T, E, N) if store else (batch, 1, 1, 1), dtype=np_dtype)
        y = np.zeros((batch, T, E), dtype=np_dtype)
        for b in range(batch):
            _scan_forward(un[b], dn[b], An, Bn[b], Cn[b], Dn, h_all[b], y[b], store)
        ctx.save_for_backward(u, delta, A, B, C, D)
        ctx.h_all = h_all
        ctx.lead = lead
        return torch.from_numpy(y).reshape(*lead, T, E).to(dtype)

    @staticmethod
    def backward(ctx, gy):
        u, delta, A, B, C, D = ctx.saved_tensors
        h_all = ctx.h_all
        np_dtype = h_all.dtype
        T, E = u.shape[-2:]
        N = A.shape[-1]
        cast = lambda x, *shape: x.detach().reshape(*shape).numpy().astype(np_dtype, copy=False)
        un, dn = cast(u, -1, T, E), cast(delta, -1, T, E)
        Bn, Cn = cast(B, -1, T, N), cast(C, -1, T, N)
        gyn = np.ascontiguousarray(cast(gy.contiguous(), -1, T, E))
        An, Dn = cast(A, E, N), cast(D, E)
        batch = un.shape[0]
        gu = np.zeros_like(un)
        gdelta = np.zeros_like(dn)
        gB = np.zeros_like(Bn)
        gC = np.zeros_like(Cn)
        gA = np.zeros((E, N), dtype=np_dtype)
        gD = np.zeros(E, dtype=np_dtype)
        for b in range(batch):
            _scan_backward(un[b], dn[b], An, Bn[b], Cn[b], Dn, h_all[b], gyn[b],
                           gu[b], gdelta[b], gA, gB[b], gC[b], gD)
        t = lambda x, like: torch.from_numpy(x).reshape(like.shape).to(like.dtype)
        return t(gu, u), t(gdelta, delta), t(gA, A), t(gB, B), t(gC, C), t(gD, D)


def selective_scan(u, delta, A, B, C, D):
    """Causal selective scan.

    Shapes: ``u, delta`` (..., T, E); ``A`` (E, N) with negative entries;
    ``B, C`` (..., T, N); ``D`` (E,). Per channel e and state n:
    ``h_t = exp(delta_t A) h_{t-1} + delta_t B_t u_t`` and
    ``y_t = sum_n C_t h_t + D u_t``. Linear time; the backward pass is an
    exact reverse-time scan.
    """
    if not bool((delta > 0).all()):
        raise ValueError("selective_scan requires delta > 0")
    return _SelectiveScan.apply(u.contiguous(), delta.contiguous(), A.contiguous(), B.contiguous(),
                                C.contiguous(), D.contiguous())


class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))

    def forward(self, x):
        return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + self.eps) * self.weight


def _inverse_softplus(x: torch.Tensor) -> torch.Tensor:
    return x + torch.log(-torch.expm1(-x))


class MambaBlock(nn.Module):
    """Pre-norm Mamba block with a causal depthwise 1-D convolution and a residual connection."""

    def __init__(self, dim: int, d_state: int = 16, d_conv: int = 4, expand: int = 2,
                 dt_rank: int | None = None, dt_min: float = 1e-3, dt_max: float = 1e-1):
        super().__init__()
        inner = expand * dim
        self.dim, self.inner, self.d_state, self.d_conv = dim, inner, d_state, d_conv
        self.dt_rank = dt_rank or math.ceil(dim / 16)
        self.norm = RMSNorm(dim)
        self.in_proj = nn.Linear(dim, 2 * inner, bias=False)
        self.conv_weight = nn.Parameter(torch.empty(inner, 1, d_conv).uniform_(-1, 1) / math.sqrt(d_conv))
        self.conv_bias = nn.Parameter(torch.zeros(inner))
        self.x_proj = nn.Linear(inner, self.dt_rank + 2 * d_state, bias=False)
        self.dt_proj = nn.Linear(self.dt_rank, inner, bias=True)
        nn.init.uniform_(self.dt_proj.weight, -self.dt_rank ** -0.5, self.dt_rank ** -0.5)
        dt = torch.exp(torch.rand(inner) * (math.log(dt_max) - math.log(dt_min)) + math.log(dt_min))
        with torch.no_grad():
            self.dt_proj.bias.copy_(_inverse_softplus(dt))
        self.A_log = nn.Parameter(torch.log(torch.arange(1, d_state + 1, dtype=torch.get_default_dtype()))
                                  .repeat(inner, 1))
        self.D = nn.Parameter(torch.ones(inner))
        self.out_proj = nn.Linear(inner, dim, bias=False)

    @property
    def A(self) -> torch.Tensor:
        return -torch.exp(self.A_log)

    def causal_conv(self, x: torch.Tensor) -> torch.Tensor:
        """Depthwise convolution along the token axis of (..., T, E); output t sees inputs t-k+1..t."""
        lead = x.shape[:-2]
        T = x.shape[-2]
        xc = x.reshape(-1, T, self.inner).transpose(1, 2)
        xc = F.conv1d(F.pad(xc, (self.d_conv - 1, 0)), self.conv_weight, self.conv_bias, groups=self.inner)
        return xc.transpose(1, 2).reshape(*lead, T, self.inner)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        main, gate = self.in_proj(self.norm(x)).chunk(2, dim=-1)
        main = F.silu(self.causal_conv(main))
        dt_in, B, C = self.x_proj(main).split([self.dt_rank, self.d_state, self.d_state], dim=-1)
        delta = F.softplus(self.dt_proj(dt_in))
        y = selective_scan(main, delta, self.A, B, C, self.D)
        return x + self.out_proj(y * F.silu(gate))


class Reconstructor(nn.Module):
    """``depth`` stacked Mamba blocks followed by a final RMSNorm; length preserving and strictly causal."""

    def __init__(self, dim: int, depth: int, d_state: int = 16, d_conv: int = 4, expand: int = 2):
        super().__init__()
        self.blocks = nn.ModuleList(MambaBlock(dim, d_state, d_conv, expand) for _ in range(depth))
        self.norm = RMSNorm(dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for block in self.blocks:
            x = block(x)
        return self.norm(x)


def reconstructor_forward(seq, params: Reconstructor):
    """Run the SSM stack over a :class:`~mvgamba.tokenizer.TokenSequence`."""
    if seq.tokens.shape[-1] != params.norm.weight.shape[0]:
        raise ValueError("token width does not match the reconstructor")
    return seq.with_tokens(params(seq.tokens))


def attention_flops(seq_len: int, dim: int) -> int:
    return 4 * seq_len * dim ** 2 + 2 * seq_len ** 2 * dim


def ssm_flops(seq_len: int, dim: int, d_state: int) -> int:
    # 3 L (2D) N for the scan plus L (2D) N for the readout
    return 4 * seq_len * (2 * dim) * d_state


FLOPS_LENGTHS = (1024, 2048, 4096, 8192, 16384, 32768)


def flops_table(lengths=FLOPS_LENGTHS, dim: int = 512, d_state: int = 16) -> dict[str, list[float]]:
    """GFLOPs of self-attention and SSM per sequence length."""
    return {
        "lengths": list(lengths),
        "attention": [attention_flops(L, dim) / 1e9 for L in lengths],
        "ssm": [ssm_flops(L, dim, d_state) / 1e9 for L in lengths],
    }
