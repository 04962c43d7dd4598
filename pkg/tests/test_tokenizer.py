import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from mvgamba.geometry import CameraView, pluecker_rays
from mvgamba.tokenizer import (Tokenizer, TokenSequence, add_positional, check_provenance, cross_scan, fuse_view,
                               inverse_scan, patch_embed, scan_orders, sequence_length, split_view)


def test_fuse_black_image_origin_camera():
    view = CameraView(np.eye(4), math.radians(60), 5, 5)
    fused = fuse_view(np.zeros((5, 5, 3)), pluecker_rays(view))
    assert fused.shape == (5, 5, 9)
    np.testing.assert_allclose(fused[2, 2], [0, 0, 0, 0, 0, -1, 0, 0, 0], atol=1e-12)


def test_fuse_split_round_trip(rng):
    img, rays = rng.random((4, 6, 3)), rng.normal(size=(4, 6, 6))
    a, b = split_view(fuse_view(img, rays))
    np.testing.assert_array_equal(a, img)
    np.testing.assert_array_equal(b, rays)
    ta, tb = split_view(fuse_view(torch.from_numpy(img), torch.from_numpy(rays)))
    assert torch.equal(ta, torch.from_numpy(img)) and torch.equal(tb, torch.from_numpy(rays))


def test_fuse_rejects_mismatch():
    with pytest.raises(ValueError):
        fuse_view(np.zeros((4, 4, 3)), np.zeros((4, 5, 6)))
    with pytest.raises(ValueError):
        fuse_view(np.zeros((4, 4, 4)), np.zeros((4, 4, 6)))


def test_patch_grid_at_full_scale():
    w = torch.zeros(8, 9, 14, 14)
    assert patch_embed(torch.zeros(448, 448, 9), w, None).shape == (32, 32, 8)


def test_patch_embed_constant_input_and_linearity():
    torch.manual_seed(0)
    w, b = torch.randn(5, 9, 4, 4, dtype=torch.float64), torch.randn(5, dtype=torch.float64)
    out = patch_embed(torch.full((8, 12, 9), 0.7, dtype=torch.float64), w, None)
    assert torch.allclose(out, out[:1, :1].expand_as(out))
    x = torch.rand(8, 12, 9, dtype=torch.float64)
    y1, y2 = patch_embed(x, w, b), patch_embed(2 * x, w, b)
    assert torch.allclose(y2 - b, 2 * (y1 - b), atol=1e-12)


def test_patch_embed_locality():
    torch.manual_seed(1)
    w = torch.randn(3, 9, 4, 4, dtype=torch.float64)
    x = torch.rand(8, 8, 9, dtype=torch.float64)
    y = patch_embed(x, w, None)
    x2 = x.clone()
    x2[4:8, 0:4] += 1.0  # patch (1, 0)
    diff = (patch_embed(x2, w, None) - y).abs().sum(-1)
    assert diff[1, 0] > 0 and diff.sum() == diff[1, 0]


def test_patch_must_divide():
    with pytest.raises(ValueError):
        patch_embed(torch.zeros(10, 10, 9), torch.zeros(2, 9, 4, 4), None)
    with pytest.raises(ValueError):
        Tokenizer(8, 3, 4, 64, 64)


def test_two_by_two_cross_scan_order():
    a, b, c, d = 1.0, 2.0, 3.0, 4.0
    grid = torch.tensor([[[a], [b]], [[c], [d]]]).unsqueeze(0)  # (1, 2, 2, 1)
    seq = cross_scan(grid)
    got = seq.tokens[:, 0].tolist()
    assert got == [a, b, c, d, d, c, b, a, a, c, b, d, d, b, c, a]


def test_full_scale_length():
    assert sequence_length(4, 448, 448, 14) == 16384
    assert sequence_length(4, 64, 64, 8) == 1024
    seq = cross_scan(torch.zeros(4, 32, 32, 1))
    assert seq.length == 16384 and seq.tokens.shape == (16384, 1)


@given(st.integers(1, 4), st.integers(1, 5), st.integers(1, 5), st.integers(1, 3))
def test_cross_scan_properties(n, h, w, c):
    grids = torch.randn(n, h, w, c, dtype=torch.float64)
    seq = cross_scan(grids)
    assert seq.length == 4 * n * h * w
    check_provenance(seq)
    # each token is a copy of the grid cell its provenance names
    v, _, r, cc = np.array(seq.provenance).T
    assert torch.equal(seq.tokens, grids[v, r, cc])
    # view-major: provenance view index is nondecreasing
    assert np.all(np.diff(v) >= 0)
    assert torch.equal(inverse_scan(seq), grids)


def test_cross_scan_batched():
    grids = torch.randn(2, 3, 2, 4, 5)
    seq = cross_scan(grids)
    assert seq.tokens.shape == (2, 3 * 4 * 2 * 4, 5)
    assert torch.allclose(inverse_scan(seq), grids)


def test_inverse_scan_averages_copies():
    grids = torch.zeros(1, 2, 2, 1, dtype=torch.float64)
    seq = cross_scan(grids)
    tokens = seq.tokens.clone()
    tokens[5] += 1.0  # a copy of some cell
    _, _, r, c = seq.provenance[5]
    out = inverse_scan(seq.with_tokens(tokens))
    assert out[0, r, c, 0] == 0.25
    assert out.abs().sum() == 0.25


def test_inverse_scan_rejects_corrupt_provenance():
    seq = cross_scan(torch.zeros(1, 2, 2, 1))
    prov = seq.provenance.copy()
    prov[1] = prov[0]
    with pytest.raises(ValueError):
        inverse_scan(TokenSequence(seq.tokens, prov, 1, 2, 2))
    prov = seq.provenance.copy()
    prov[0, 1] = 7
    with pytest.raises(ValueError):
        check_provenance(TokenSequence(seq.tokens, prov, 1, 2, 2))


def test_scan_orders_are_permutations():
    orders = scan_orders(3, 4)
    for o in orders:
        assert sorted(o.tolist()) == list(range(12))


def test_add_positional():
    seq = cross_scan(torch.randn(1, 2, 2, 3, dtype=torch.float64))
    E = torch.zeros(16, 3, dtype=torch.float64, requires_grad=True)
    assert torch.equal(add_positional(seq, E).tokens, seq.tokens)
    E2 = torch.randn(16, 3, dtype=torch.float64, requires_grad=True)
    twice = add_positional(add_positional(seq, E2), E2).tokens
    assert torch.allclose(twice, seq.tokens + 2 * E2)
    add_positional(seq, E2).tokens.sum().backward()
    assert torch.equal(E2.grad, torch.ones_like(E2))
    with pytest.raises(ValueError):
        add_positional(seq, torch.zeros(15, 3))


def test_tokenizer_module_shapes_and_init():
    torch.manual_seed(0)
    tok = Tokenizer(dim=32, patch=8, n_views=4, height=64, width=64)
    assert tok.pos_embed.shape == (1024, 32)
    assert torch.equal(tok.bias, torch.zeros(32))
    assert abs(float(tok.weight.detach().std()) - 0.02) < 0.002
    seq = tok(torch.rand(4, 64, 64, 9))
    assert seq.tokens.shape == (1024, 32)
