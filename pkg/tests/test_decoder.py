import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from mvgamba.decoder import (N_ROTATIONS, S_BASE, S_MAX, Decoder, GaussianSet, decode_gaussians, gumbel_noise,
                             temperature_at)
from mvgamba.diffcore import grad_check
from mvgamba.geometry import CANONICAL_ROTATIONS
from mvgamba.tokenizer import cross_scan


def _decoder(dim=8, bins=16, mode="3d", seed=0):
    torch.manual_seed(seed)
    return Decoder(dim, bins, mode).double()


def _zero_heads(dec):
    for head in (dec.pos_head, dec.scale_head, dec.opacity_head, dec.color_head, dec.rot_head):
        torch.nn.init.zeros_(head.weight)
        if head.bias is not None:
            torch.nn.init.zeros_(head.bias)


def test_channel_mlp_shapes_and_zero_weights():
    dec = _decoder(8)
    assert dec.fc1.out_features == 32
    assert Decoder(512, 4).fc1.out_features == 2048
    for p in (dec.fc1.weight, dec.fc1.bias, dec.fc2.weight, dec.fc2.bias):
        torch.nn.init.zeros_(p)
    assert torch.equal(dec.channel_mlp(torch.randn(3, 8, dtype=torch.float64)), torch.zeros(3, 8, dtype=torch.float64))


def test_channel_mlp_gradients():
    dec = _decoder(8)
    assert grad_check(dec.channel_mlp, torch.randn(4, 8)).ok


def test_position_uniform_and_limit():
    dec = _decoder(8, 16)
    _zero_heads(dec)
    assert torch.allclose(dec.decode_position(torch.randn(5, 8, dtype=torch.float64)), torch.zeros(5, 3, dtype=torch.float64), atol=1e-15)
    with torch.no_grad():
        dec.pos_head.bias.view(3, 16)[:, -1] = 1e4
    np.testing.assert_allclose(dec.decode_position(torch.zeros(1, 8, dtype=torch.float64)).detach().numpy(), 1.0)
    centers = dec.bin_centers
    assert centers[0] == -1 and centers[-1] == 1 and torch.allclose(centers.diff(), centers.diff()[0].expand(15))


def test_scale_heads():
    dec = _decoder(8, mode="3d")
    _zero_heads(dec)
    z = torch.randn(4, 8, dtype=torch.float64)
    assert torch.allclose(dec.decode_scale(z), torch.full((4, 3), S_BASE * math.log(2), dtype=torch.float64))
    with torch.no_grad():
        dec.scale_head.bias.fill_(-20.0)
    s = dec.decode_scale(z)
    assert (s > 0).all() and (s < 1e-7).all()
    assert _decoder(8, mode="2d").decode_scale(z).shape == (4, 2)


def test_opacity_and_color_heads():
    dec = _decoder(8)
    _zero_heads(dec)
    z = torch.randn(4, 8, dtype=torch.float64)
    assert torch.equal(dec.decode_opacity(z), torch.full((4,), 0.5, dtype=torch.float64))
    assert torch.equal(dec.decode_color(z), torch.full((4, 3), 0.5, dtype=torch.float64))
    with torch.no_grad():
        dec.opacity_head.weight.fill_(1.0)
    xs = torch.linspace(-3, 3, 13, dtype=torch.float64)[:, None].expand(13, 8) / 8
    assert (dec.decode_opacity(xs).diff() > 0).all()


@given(st.floats(1e-3, 10), st.integers(0, 2 ** 31))
def test_rotnet_simplex_and_unit_quaternion(tau, seed):
    dec = _decoder(8)
    z = torch.randn(6, 8, dtype=torch.float64) * 5
    q, p = dec.rotnet(z, tau, "train", rng=np.random.default_rng(seed))
    assert torch.allclose(p.sum(-1), torch.ones(6, dtype=torch.float64))
    assert torch.allclose(q.norm(dim=-1), torch.ones(6, dtype=torch.float64), atol=1e-12)


def test_rotnet_infer_identity_and_determinism():
    dec = _decoder(8)
    _zero_heads(dec)
    with torch.no_grad():
        dec.rot_head.weight[0] = 1.0
    z = torch.ones(3, 8, dtype=torch.float64)
    q, p = dec.rotnet(z, mode="infer", rng=np.random.default_rng(0))
    assert torch.equal(q, torch.tensor([[1.0, 0, 0, 0]] * 3, dtype=torch.float64))
    assert torch.equal(p[:, 0], torch.ones(3, dtype=torch.float64))
    dec2 = _decoder(8, seed=4)
    z = torch.randn(10, 8, dtype=torch.float64)
    a, _ = dec2.rotnet(z, mode="infer", rng=np.random.default_rng(1))
    b, _ = dec2.rotnet(z, mode="infer", rng=np.random.default_rng(2))
    assert torch.equal(a, b)
    rows = {tuple(r) for r in a.detach().numpy()}
    table = {tuple(r) for r in CANONICAL_ROTATIONS}
    assert rows <= table


def test_rotnet_argmax_shift_invariance():
    dec = _decoder(8)
    z = torch.randn(10, 8, dtype=torch.float64)
    a, _ = dec.rotnet(z, mode="infer")
    logits = dec.rot_head(z)
    assert torch.equal(logits.argmax(-1), (logits + 123.0).argmax(-1))
    assert torch.equal(a, dec.rotation_table[logits.argmax(-1)])


def test_rotnet_low_temperature_is_one_hot():
    dec = _decoder(8)
    _zero_heads(dec)
    with torch.no_grad():
        dec.rot_head.weight[7, 0] = 20.0
    z = torch.zeros(10_000, 8, dtype=torch.float64)
    z[:, 0] = 1.0
    _, p = dec.rotnet(z, 0.01, "train", rng=np.random.default_rng(0))
    onehot = torch.zeros_like(p)
    onehot[:, 7] = 1
    assert float((p - onehot).abs().max().detach()) < 1e-6


def test_rotnet_rejects_bad_temperature():
    dec = _decoder(8)
    with pytest.raises(ValueError):
        dec.rotnet(torch.zeros(1, 8, dtype=torch.float64), 0.0, "train", rng=np.random.default_rng(0))
    with pytest.raises(ValueError):
        dec.rotnet(torch.zeros(1, 8, dtype=torch.float64), 1.0, "train")


def test_entropy_nondecreasing_in_temperature():
    rng = np.random.default_rng(5)
    for _ in range(50):
        logits = torch.as_tensor(rng.normal(size=32) * 3)
        g = gumbel_noise(rng, (32,), torch.float64)
        ent = []
        for tau in (0.01, 0.1, 0.5, 1.0, 2.0, 5.0):
            p = torch.softmax((logits + g) / tau, -1)
            ent.append(float(-(p * torch.log(p.clamp(min=1e-300))).sum()))
        assert all(b >= a - 1e-12 for a, b in zip(ent, ent[1:]))


def test_temperature_schedule():
    assert temperature_at(0, 1000) == 2.0
    assert temperature_at(1000, 1000) == pytest.approx(0.01)
    assert temperature_at(500, 1000) == pytest.approx(math.sqrt(2.0 * 0.01))
    vals = [temperature_at(s, 100) for s in range(101)]
    assert all(b < a for a, b in zip(vals, vals[1:]))


def test_zero_tokens_zero_heads():
    dec = _decoder(8)
    _zero_heads(dec)
    g = torch.zeros(N_ROTATIONS, dtype=torch.float64)
    gs = dec(torch.zeros(5, 8, dtype=torch.float64), 1.0, "train", gumbel=g.expand(5, N_ROTATIONS))
    assert torch.allclose(gs.means, torch.zeros(5, 3, dtype=torch.float64), atol=1e-15)
    assert torch.equal(gs.opacities, torch.full((5,), 0.5, dtype=torch.float64))
    assert torch.equal(gs.colors, torch.full((5, 3), 0.5, dtype=torch.float64))
    assert torch.allclose(gs.scales, torch.full((5, 3), S_BASE * math.log(2), dtype=torch.float64))
    mean_q = CANONICAL_ROTATIONS.mean(0)
    np.testing.assert_allclose(gs.quats[0].detach().numpy(), mean_q / np.linalg.norm(mean_q), atol=1e-12)


def test_sequence_to_gaussians_count():
    torch.manual_seed(0)
    dec = Decoder(4, 8)
    seq = cross_scan(torch.randn(4, 32, 32, 4))
    gs = decode_gaussians(seq, dec, mode="infer")
    assert gs.count == 16384 and gs.means.shape == (16384, 3) and gs.opacities.shape == (16384,)


@pytest.mark.parametrize("mode", ["3d", "2d"])
@pytest.mark.parametrize("dtype", [torch.float32, torch.float64])
def test_hard_ranges_under_adversarial_inputs(mode, dtype):
    torch.manual_seed(1)
    dec = Decoder(16, 32, mode).to(dtype)
    for scale in (1.0, 1e3):
        z = torch.randn(2000, 16, dtype=dtype) * scale
        for m in ("train", "infer"):
            gs = dec(z, 0.5, m, rng=np.random.default_rng(0))
            assert (gs.means.abs() <= 1).all()
            assert (gs.scales > 0).all() and (gs.scales <= S_MAX).all()
            assert (gs.opacities > 0).all() and (gs.opacities < 1).all()
            assert (gs.colors >= 0).all() and (gs.colors <= 1).all()
            assert ((gs.quats.norm(dim=-1) - 1).abs() < 1e-5).all()


def test_all_heads_gradients_with_frozen_noise():
    dec = _decoder(6, 5)
    g = gumbel_noise(np.random.default_rng(0), (3, N_ROTATIONS), torch.float64)
    names = [n for n, _ in dec.named_parameters()]

    def f(z, *ps):
        gs = torch.func.functional_call(dec, dict(zip(names, ps)), (z, 0.7, "train", g))
        return torch.cat([gs.means.reshape(-1), gs.scales.reshape(-1), gs.colors.reshape(-1), gs.opacities,
                          gs.quats.reshape(-1)])

    rep = grad_check(f, [torch.randn(3, 6)] + [p.detach().clone() for p in dec.parameters()])
    assert rep.ok, rep.failures[:3]


def test_gaussian_set_helpers():
    gs = GaussianSet(torch.zeros(2, 4, 3), torch.ones(2, 4, 3), torch.zeros(2, 4, 3), torch.full((2, 4), 0.5),
                     torch.tensor([1.0, 0, 0, 0]).expand(2, 4, 4))
    assert gs[1].count == 4 and gs[1].means.shape == (4, 3)
    sub = gs[0].select([0, 2])
    assert sub.count == 2 and sub.opacities.shape == (2,)
    both = GaussianSet.concat([gs[0], sub])
    assert both.count == 6
    with pytest.raises(ValueError):
        GaussianSet(torch.zeros(1, 3), torch.ones(1, 2), torch.zeros(1, 3), torch.ones(1), torch.ones(1, 4), "3d")
