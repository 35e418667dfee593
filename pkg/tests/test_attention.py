import math

import mpmath
import numpy as np
import pytest
import torch

from hoireenact.attention import (
    AttentionConfig,
    GateParams,
    GatedBlockAttention,
    TokenLayout,
    build_flow_mask,
    masked_attention,
    soft_flow_gate,
)
from hoireenact.numerics import NumericsError, grad_check
from hoireenact.rope import RopeKind, RopeMode, build_freqs, head_positions

D = torch.float64
MODES = [RopeKind.VIDEO_ONLY, RopeKind.SEPARATE_REF, RopeKind.HEAD_SLIDING]


def test_flow_mask_three_tokens():
    layout = TokenLayout(torch.tensor([True, False]), 1)
    assert build_flow_mask(layout).dense().tolist() == [[1, 1, 1], [1, 1, 0], [0, 0, 1]]
    mask = build_flow_mask(layout)
    assert mask(1, 2) == 0 and mask(0, 2) == 1 and mask(2, 2) == 1


def test_flow_mask_no_reference_is_all_ones():
    layout = TokenLayout(torch.tensor([True, False, False]), 0)
    assert (build_flow_mask(layout).dense() == 1).all()


def test_flow_mask_all_hoi_only_reference_rows_blocked():
    layout = TokenLayout(torch.ones(4, dtype=torch.bool), 2)
    m = build_flow_mask(layout).dense()
    assert (m[:4] == 1).all()
    assert m[4:, :4].eq(0).all() and m[4:, 4:].eq(1).all()


def test_single_allowed_key_returns_its_value():
    q = torch.randn(1, 1, 4, dtype=D)
    k = torch.randn(1, 1, 4, dtype=D)
    v = torch.randn(1, 1, 4, dtype=D)
    assert torch.equal(masked_attention(q, k, v, None, 0.5), v)


def test_all_ones_mask_matches_unmasked_bitwise():
    layout = TokenLayout(torch.ones(5, dtype=torch.bool), 0)
    q, k, v = (torch.randn(2, 5, 8, dtype=D) for _ in range(3))
    a = masked_attention(q, k, v, build_flow_mask(layout), 0.3)
    b = masked_attention(q, k, v, None, 0.3)
    assert torch.equal(a, b)


def test_three_token_hand_computed_weights():
    layout = TokenLayout(torch.tensor([True, False]), 1)
    e = 2.0 * torch.eye(3, dtype=D)
    q = k = v = e[None]
    scale = 1.0 / math.sqrt(3)
    out, w = masked_attention(q, k, v, build_flow_mask(layout), scale, return_weights=True)
    # oracle: softmax over allowed keys evaluated in 40-digit arithmetic
    mpmath.mp.dps = 40
    allowed = [[1, 1, 1], [1, 1, 0], [0, 0, 1]]
    expected = np.zeros((3, 3))
    for i in range(3):
        logits = [mpmath.mpf(4) * mpmath.sqrt(mpmath.mpf(1) / 3) if i == j else mpmath.mpf(0) for j in range(3)]
        z = sum(mpmath.e ** logits[j] for j in range(3) if allowed[i][j])
        for j in range(3):
            expected[i, j] = float(mpmath.e ** logits[j] / z) if allowed[i][j] else 0.0
    assert np.allclose(w[0].numpy(), expected, atol=1e-6)
    assert np.allclose(out[0].numpy(), expected @ (2.0 * np.eye(3)), atol=1e-6)
    assert w[0, 1, 2].item() == 0.0 and w[0, 2, 0].item() == 0.0


def test_weights_rows_sum_to_one_and_blocked_exactly_zero():
    g = torch.Generator().manual_seed(1)
    layout = TokenLayout(torch.rand(12, generator=g) > 0.5, 4)
    mask = build_flow_mask(layout)
    q, k, v = (torch.randn(3, 16, 8, generator=g, dtype=D) for _ in range(3))
    _, w = masked_attention(q, k, v, mask, 0.35, return_weights=True)
    assert (w[:, mask.dense() == 0] == 0).all()
    assert (w.sum(-1) - 1).abs().max() < 1e-12
    _, w32 = masked_attention(q.float(), k.float(), v.float(), mask, 0.35, return_weights=True)
    assert (w32.sum(-1) - 1).abs().max() < 1e-6


def test_token_count_mismatch_rejected():
    with pytest.raises(NumericsError):
        masked_attention(torch.zeros(1, 2, 4), torch.zeros(1, 3, 4), torch.zeros(1, 3, 4), None, 1.0)


def test_soft_flow_gate_closed_forms():
    x = torch.randn(6, 8, dtype=D)
    p = GateParams(8).double()
    with torch.no_grad():
        p.fcn_bias.fill_(0.0)
    assert torch.equal(soft_flow_gate(x, p), 0.5 * x)
    with torch.no_grad():
        p.fcn_bias.fill_(2.0)
    ratio = soft_flow_gate(x, p) / x
    assert torch.allclose(ratio, torch.full_like(x, 0.880797), atol=1e-6)
    with torch.no_grad():
        p.fcn_bias.fill_(-20.0)
    out = soft_flow_gate(x, p)
    assert (out.norm(dim=-1) < 1e-7 * x.norm(dim=-1)).all()


def test_soft_flow_gate_strictly_shrinks_rows():
    g = torch.Generator().manual_seed(2)
    p = GateParams(8).double()
    with torch.no_grad():
        p.fcn_weight.copy_(torch.randn(8, 1, generator=g, dtype=D))
        p.fcn_bias.fill_(1.0)
    x = torch.randn(20, 8, generator=g, dtype=D)
    assert (soft_flow_gate(x, p).norm(dim=-1) < x.norm(dim=-1)).all()


def test_gate_param_count():
    assert sum(t.numel() for t in GateParams(64).parameters()) == 3 * 64 + 1


def _block(kind, n_head=4, head_dim=6, mask=True, gate=True, seed=0):
    torch.manual_seed(seed)
    cfg = AttentionConfig(n_head, head_dim, RopeMode(kind, n_head), gate, mask)
    blk = GatedBlockAttention(cfg).double()
    with torch.no_grad():
        if blk.gate is not None:
            blk.gate.fcn_weight.normal_(0, 0.5)
    return blk


def _run(blk, tokens, hoi, n_ref, extents, ref_grid):
    layout = TokenLayout(hoi, n_ref)
    pos = head_positions(extents, ref_grid if n_ref else None, blk.config.rope_mode, blk.config.n_head)
    return blk(tokens, layout, pos, build_freqs(blk.config.head_dim))


def test_all_features_off_is_vanilla_attention():
    blk = _block(RopeKind.VIDEO_ONLY, mask=False, gate=False)
    x = torch.randn(8, 24, dtype=D)
    out = _run(blk, x, torch.zeros(8, dtype=torch.bool), 0, (2, 2, 2), None)
    # vanilla reference: same projections, rotary on video coordinates, plain softmax
    freqs = build_freqs(6)
    pos = head_positions((2, 2, 2), None, blk.config.rope_mode, 4)
    h = lambda t: t.reshape(8, 4, 6).transpose(0, 1)
    from hoireenact.rope import apply_rotary

    q = apply_rotary(h(x @ blk.w_q + blk.b_q), pos, freqs)
    k = apply_rotary(h(x @ blk.w_k + blk.b_k), pos, freqs)
    w = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(6), -1)
    ref = (w @ h(x @ blk.w_v + blk.b_v)).transpose(0, 1).reshape(8, 24) @ blk.w_o + blk.b_o
    assert torch.allclose(out, ref, atol=1e-12)


@pytest.mark.parametrize("kind", MODES)
def test_background_equivalence(kind):
    extents, ref_grid = (2, 2, 3), (2, 1)
    n_video, n_ref = 12, 2
    for trial in range(20):
        g = torch.Generator().manual_seed(trial)
        blk = _block(kind, seed=trial)
        hoi = torch.rand(n_video, generator=g) > 0.5
        x = torch.randn(n_video + n_ref, 24, generator=g, dtype=D)
        with_ref = _run(blk, x, hoi, n_ref, extents, ref_grid)
        without = _run(blk, x[:n_video], hoi, 0, extents, ref_grid)
        bg = ~hoi
        assert (with_ref[:n_video][bg] - without[bg]).abs().max() <= 1e-12


@pytest.mark.parametrize("kind", MODES)
def test_hoi_tokens_see_reference_and_reference_ignores_video(kind):
    extents, ref_grid = (2, 2, 2), (1, 2)
    g = torch.Generator().manual_seed(0)
    blk = _block(kind)
    hoi = torch.tensor([True, False] * 4)
    x = torch.randn(10, 24, generator=g, dtype=D)
    base = _run(blk, x, hoi, 2, extents, ref_grid)
    x2 = x.clone()
    x2[8:] += torch.randn(2, 24, generator=g, dtype=D)
    pert = _run(blk, x2, hoi, 2, extents, ref_grid)
    assert (pert[:8][hoi] - base[:8][hoi]).abs().max() > 1e-6
    x3 = x.clone()
    x3[:8] += torch.randn(8, 24, generator=g, dtype=D)
    pert_video = _run(blk, x3, hoi, 2, extents, ref_grid)
    assert torch.equal(pert_video[8:], base[8:])


def test_disabling_hard_mask_breaks_background_equivalence():
    blk = _block(RopeKind.HEAD_SLIDING, mask=False)
    g = torch.Generator().manual_seed(4)
    hoi = torch.tensor([True, False] * 4)
    x = torch.randn(10, 24, generator=g, dtype=D)
    with_ref = _run(blk, x, hoi, 2, (2, 2, 2), (1, 2))
    without = _run(blk, x[:8], hoi, 0, (2, 2, 2), (1, 2))
    assert (with_ref[:8][~hoi] - without[~hoi]).abs().max() > 1e-6


def test_block_batched_matches_per_sample():
    blk = _block(RopeKind.HEAD_SLIDING)
    g = torch.Generator().manual_seed(5)
    hoi = torch.rand(2, 8, generator=g) > 0.5
    x = torch.randn(2, 10, 24, generator=g, dtype=D)
    batched = _run(blk, x, hoi, 2, (2, 2, 2), (1, 2))
    for b in range(2):
        single = _run(blk, x[b], hoi[b], 2, (2, 2, 2), (1, 2))
        assert torch.allclose(batched[b], single, atol=1e-13)


def test_masked_attention_gradients():
    g = torch.Generator().manual_seed(6)
    layout = TokenLayout(torch.tensor([True, False]), 1)
    mask = build_flow_mask(layout)
    q, k, v = (torch.randn(2, 3, 4, generator=g, dtype=D) for _ in range(3))
    w = torch.randn(2, 3, 4, generator=g, dtype=D)
    for which in range(3):
        def f(x, which=which):
            args = [q, k, v]
            args[which] = x
            return (masked_attention(*args, mask, 0.5) * w).sum()

        rep = grad_check(f, [q, k, v][which])
        assert rep.passed, rep
