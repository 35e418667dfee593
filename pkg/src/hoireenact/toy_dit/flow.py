"""Rectified-flow objective, Euler sampler and sample -> model-input conditioning."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import torch

from ..hcu import (
    assemble_latent,
    decode_stub,
    encode_stub,
    make_reference_video,
    pool_mask,
    ref_in_bbox,
)
from ..synthdata import Sample
from .model import ModelConfig, ToyDiT


@dataclass
class Conditioning:
    ref_video_latent: torch.Tensor  # [B, F, Hl, Wl, C]
    pooled_mask: torch.Tensor  # [B, F, Hl, Wl, 1]
    ref_latent: Optional[torch.Tensor]  # [B, Hr, Wr, C] or None

    def to(self, dtype: torch.dtype) -> "Conditioning":
        ref = None if self.ref_latent is None else self.ref_latent.to(dtype)
        return Conditioning(self.ref_video_latent.to(dtype), self.pooled_mask.to(dtype), ref)


def build_conditioning(
    samples: Sequence[Sample], cfg: ModelConfig, ref_images: Optional[Sequence[torch.Tensor]] = None
) -> tuple[torch.Tensor, Conditioning]:
    """Clean latents x0 [B, F, Hl, Wl, C] and their conditioning.

    ``ref_images`` overrides each sample's own reference image (cross-reenactment).
    """
    s = cfg.stride
    x0, vr, pm, refs = [], [], [], []
    for i, smp in enumerate(samples):
        ref_img = smp.ref_image if ref_images is None else ref_images[i]
        if cfg.reference == "bbox":
            v_r = ref_in_bbox(smp.video, smp.mask, ref_img, cfg.condition_mode)
        else:
            v_r = make_reference_video(smp.video, smp.mask, cfg.condition_mode)
        x0.append(encode_stub(smp.video, s))
        vr.append(encode_stub(v_r, s))
        pm.append(pool_mask(smp.mask, s))
        refs.append(encode_stub(ref_img[0], s))
    ref_latent = torch.stack(refs) if cfg.uses_ref_tokens else None
    return torch.stack(x0), Conditioning(torch.stack(vr), torch.stack(pm), ref_latent)


def model_velocity(model: ToyDiT, x_t: torch.Tensor, cond: Conditioning, t: torch.Tensor) -> torch.Tensor:
    assembly = assemble_latent(x_t, cond.ref_video_latent, cond.pooled_mask)
    return model(assembly, cond.ref_latent, t)


def interpolate(x0: torch.Tensor, eps: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    tt = t.reshape(*t.shape, *([1] * (x0.dim() - t.dim())))
    return (1 - tt) * x0 + tt * eps


def rf_loss(model: ToyDiT, x0: torch.Tensor, cond: Conditioning, eps: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    """Mean squared error between the predicted velocity and eps - x0."""
    pred = model_velocity(model, interpolate(x0, eps, t), cond, t)
    return ((pred - (eps - x0)) ** 2).mean()


@torch.no_grad()
def sample(model: ToyDiT, cond: Conditioning, n_steps: int, seed: int, decode: bool = True) -> torch.Tensor:
    """Euler-integrate the velocity field from t=1 (noise) to t=0 and decode to pixels."""
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    cfg = model.cfg
    dtype = next(model.parameters()).dtype
    cond = cond.to(dtype)
    b = cond.ref_video_latent.shape[0]
    gen = torch.Generator().manual_seed(seed)
    x = torch.randn(cond.ref_video_latent.shape, generator=gen, dtype=torch.float64).to(dtype)
    dt = 1.0 / n_steps
    for i in range(n_steps):
        t = torch.full((b,), 1.0 - i * dt, dtype=dtype)
        x = x - dt * model_velocity(model, x, cond, t)
    if not decode:
        return x
    return decode_stub(x, cfg.stride).clamp(-1.0, 1.0)
