"""Registered finite-difference checks over the differentiable composites.

The component checks reduce their output to a scalar with fixed random weights (a
plain sum would hide sign and permutation errors in the backward pass). The
whole-model check uses the plain sum: its parameter gradients are products of many
factors and the weighted objective leaves some of them near 1e-7, where central
differences at h=1e-5 lose their relative accuracy.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional

import torch
from torch.func import functional_call

from .attention import (
    AttentionConfig,
    GateParams,
    GatedBlockAttention,
    TokenLayout,
    build_flow_mask,
    masked_attention,
    soft_flow_gate,
)
from .numerics import GradCheckReport, grad_check
from .rope import RopeKind, RopeMode, apply_rotary, build_freqs, head_positions
from .toy_dit.model import ModelConfig, ToyDiT

D = torch.float64


def _gen(seed: int) -> torch.Generator:
    return torch.Generator().manual_seed(seed)


def _weighted(out: torch.Tensor, g: torch.Generator) -> Callable[[torch.Tensor], torch.Tensor]:
    w = torch.randn(out.shape, generator=g, dtype=D)
    return lambda y: (y * w).sum()


def _flat_params(module: torch.nn.Module) -> tuple[list[str], list[torch.Size], torch.Tensor]:
    names, shapes, flats = [], [], []
    for n, p in module.named_parameters():
        names.append(n)
        shapes.append(p.shape)
        flats.append(p.detach().reshape(-1))
    return names, shapes, torch.cat(flats)


def _unflatten(names, shapes, flat: torch.Tensor) -> dict[str, torch.Tensor]:
    out, i = {}, 0
    for n, s in zip(names, shapes):
        k = s.numel()
        out[n] = flat[i : i + k].reshape(s)
        i += k
    return out


def _randomize(module: torch.nn.Module, g: torch.Generator, scale: float = 0.4) -> None:
    # zero-initialised heads and gates would make many gradients trivially zero
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * scale)


def check_rotary(seed: int = 0) -> GradCheckReport:
    g = _gen(seed)
    freqs = build_freqs(12)
    pos = torch.randint(-5, 6, (2, 5, 3), generator=g)
    x = torch.randn(2, 5, 12, generator=g, dtype=D)
    obj = _weighted(x, g)
    return grad_check(lambda z: obj(apply_rotary(z, pos, freqs)), x)


def check_masked_attention(seed: int = 0) -> GradCheckReport:
    g = _gen(seed)
    layout = TokenLayout(torch.tensor([True, False, True, False]), 2)
    mask = build_flow_mask(layout)
    q, k, v = (torch.randn(2, 6, 4, generator=g, dtype=D) for _ in range(3))
    obj = _weighted(q, g)
    # one vector over (q, k, v) so all three inputs are checked in one report
    packed = torch.cat([q, k, v]).reshape(-1)

    def f(z):
        qq, kk, vv = z.reshape(3 * 2, 6, 4).split(2)
        return obj(masked_attention(qq, kk, vv, mask, 0.5))

    return grad_check(f, packed)


class _GateApply(torch.nn.Module):
    def __init__(self, d: int):
        super().__init__()
        self.gate = GateParams(d)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return soft_flow_gate(x, self.gate)


def check_soft_gate(seed: int = 0) -> GradCheckReport:
    g = _gen(seed)
    mod = _GateApply(6).double()
    _randomize(mod, g)
    x = torch.randn(5, 6, generator=g, dtype=D)
    names, shapes, theta = _flat_params(mod)
    obj = _weighted(x, g)
    n_x = x.numel()

    def f(z):
        return obj(functional_call(mod, _unflatten(names, shapes, z[n_x:]), (z[:n_x].reshape(5, 6),)))

    return grad_check(f, torch.cat([x.reshape(-1), theta]))


def check_gated_block(seed: int = 0) -> GradCheckReport:
    g = _gen(seed)
    cfg = AttentionConfig(2, 6, RopeMode(RopeKind.HEAD_SLIDING, 2), True, True)
    blk = GatedBlockAttention(cfg).double()
    _randomize(blk, g)
    layout = TokenLayout(torch.tensor([True, False, False, True]), 2)
    pos = head_positions((2, 1, 2), (1, 2), cfg.rope_mode, 2)
    freqs = build_freqs(6)
    x = torch.randn(6, 12, generator=g, dtype=D)
    names, shapes, theta = _flat_params(blk)
    obj = _weighted(x, g)
    n_x = x.numel()

    def f(z):
        params = _unflatten(names, shapes, z[n_x:])
        out = functional_call(blk, params, (z[:n_x].reshape(6, 12), layout, pos, freqs))
        return obj(out)

    return grad_check(f, torch.cat([x.reshape(-1), theta]))


def tiny_model_config() -> ModelConfig:
    return ModelConfig(
        n_blocks=1,
        n_head=1,
        head_dim=8,
        mlp_ratio=2,
        latent_extents=(2, 2, 2),
        ref_extents=(1, 2),
        seed=0,
    )


def check_model(seed: int = 0) -> GradCheckReport:
    g = _gen(seed)
    cfg = tiny_model_config()
    model = ToyDiT(cfg).double()
    _randomize(model, g, 0.3)
    c = cfg.latent_channels
    x_t = torch.randn(1, *cfg.latent_extents, c, generator=g, dtype=D)
    ref_v = torch.randn(1, *cfg.latent_extents, c, generator=g, dtype=D)
    mask = torch.tensor([1.0, 0.0, 0.25, 0.0, 0.0, 0.5, 0.0, 1.0], dtype=D).reshape(1, 2, 2, 2, 1)
    assembly = torch.cat([x_t, ref_v, mask], dim=-1)
    ref = torch.randn(1, *cfg.ref_extents, c, generator=g, dtype=D)
    t = torch.tensor([0.3], dtype=D)
    names, shapes, theta = _flat_params(model)

    def f(z):
        return functional_call(model, _unflatten(names, shapes, z), (assembly, ref, t)).sum()

    return grad_check(f, theta)


GRAD_CHECKS: dict[str, Callable[[int], GradCheckReport]] = {
    "rotary": check_rotary,
    "masked_attention": check_masked_attention,
    "soft_gate": check_soft_gate,
    "gated_block": check_gated_block,
    "model": check_model,
}


def run_grad_checks(names: Optional[Iterable[str]] = None, seed: int = 0) -> dict[str, GradCheckReport]:
    names = list(names) if names is not None else list(GRAD_CHECKS)
    unknown = [n for n in names if n not in GRAD_CHECKS]
    if unknown:
        raise KeyError(f"unknown gradient checks {unknown}; choose from {sorted(GRAD_CHECKS)}")
    return {n: GRAD_CHECKS[n](seed) for n in names}
