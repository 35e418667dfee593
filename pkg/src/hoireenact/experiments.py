"""Training/evaluation orchestration shared by the CLI and the acceptance suite."""

from __future__ import annotations

import time
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np
import torch

from .hcu import ConditionMode, classify_tokens
from .metrics import MassCurve, object_consistency, psnr, reference_mass_by_frame, ssim
from .rope import RopeKind
from .synthdata import Sample, SceneSpec, cross_pair, derive_seed
from .toy_dit.flow import build_conditioning, model_velocity, sample
from .toy_dit.model import ModelConfig, ToyDiT
from .toy_dit.train import TrainConfig, TrainState, train

ARMS: dict[str, dict] = {
    "hcu": dict(
        reference="none", rope_kind=RopeKind.VIDEO_ONLY, hard_mask_enabled=False, gate_enabled=False
    ),
    "hcu_separate_rope": dict(
        reference="tokens", rope_kind=RopeKind.SEPARATE_REF, hard_mask_enabled=False, gate_enabled=False
    ),
    "hcu_ref_in_bbox": dict(
        reference="bbox", rope_kind=RopeKind.VIDEO_ONLY, hard_mask_enabled=False, gate_enabled=False
    ),
    "hcu_hs_rope": dict(
        reference="tokens", rope_kind=RopeKind.HEAD_SLIDING, hard_mask_enabled=False, gate_enabled=False
    ),
    "hcu_hs_rope_sag": dict(
        reference="tokens", rope_kind=RopeKind.HEAD_SLIDING, hard_mask_enabled=True, gate_enabled=True
    ),
    "hcu_hs_rope_sag_flf": dict(
        reference="tokens",
        rope_kind=RopeKind.HEAD_SLIDING,
        hard_mask_enabled=True,
        gate_enabled=True,
        condition_mode=ConditionMode.FIRST_LAST_FRAME,
    ),
}

ARM_LABELS = {
    "hcu": "HCU",
    "hcu_separate_rope": "HCU + separate RoPE",
    "hcu_ref_in_bbox": "HCU + ref-in-bbox",
    "hcu_hs_rope": "HCU + HS RoPE",
    "hcu_hs_rope_sag": "HCU + HS RoPE + SAG",
    "hcu_hs_rope_sag_flf": "HCU + HS RoPE + SAG + FLF(full)",
}


def model_config_for_scene(scene: SceneSpec, base: Optional[ModelConfig] = None, **overrides) -> ModelConfig:
    base = base or ModelConfig()
    s = base.stride
    h, w = scene.canvas
    rh, rw = scene.object_size[0] + 2 * scene.ref_pad, scene.object_size[1] + 2 * scene.ref_pad
    return replace(
        base,
        latent_extents=(scene.frames, h // s, w // s),
        ref_extents=(rh // s, rw // s),
        **overrides,
    )


def arm_config(arm: str, base: ModelConfig) -> ModelConfig:
    if arm not in ARMS:
        raise KeyError(f"unknown ablation arm {arm!r}; choose from {sorted(ARMS)}")
    opts = dict(ARMS[arm])
    opts.setdefault("condition_mode", ConditionMode.FIRST_FRAME)
    return replace(base, **opts)


@dataclass
class SampleScores:
    name: str
    psnr: float
    ssim: float
    oc: float


def evaluate(
    model: ToyDiT,
    samples: Sequence[Sample],
    n_steps: int = 20,
    seed: int = 0,
    batch_size: int = 4,
) -> list[SampleScores]:
    """Reconstruct each sample from noise given its own (reference video, mask, reference image).

    The consistency proxy crops the object's own bounding box, not the dilated hand+object mask.
    """
    model.eval()
    scores = []
    for start in range(0, len(samples), batch_size):
        chunk = list(samples[start : start + batch_size])
        _, cond = build_conditioning(chunk, model.cfg)
        video = sample(model, cond, n_steps, derive_seed(seed, start))
        for i, smp in enumerate(chunk):
            gt = smp.video
            scores.append(
                SampleScores(
                    f"seed{smp.seed}_tex{smp.texture_seed}",
                    psnr(video[i], gt),
                    ssim(video[i], gt),
                    object_consistency(video[i], smp.object_support.float(), smp.ref_image),
                )
            )
    return scores


def cross_samples(samples: Sequence[Sample], donor_master_seed: int) -> list[Sample]:
    """Ground-truth re-renders with donor textures; the clean first frame shows the donor object."""
    return [cross_pair(s, derive_seed(donor_master_seed, i)) for i, s in enumerate(samples)]


def train_arm(
    arm: str,
    base: ModelConfig,
    samples: Sequence[Sample],
    tcfg: TrainConfig,
    dtype: torch.dtype = torch.float32,
) -> tuple[ToyDiT, TrainState]:
    cfg = arm_config(arm, base)
    model = ToyDiT(cfg).to(dtype)
    state = train(model, samples, tcfg)
    return model, state


@torch.no_grad()
def attention_mass_curves(
    model: ToyDiT, samples: Sequence[Sample], t: float = 0.5, seed: int = 0, layer: int = 0
) -> tuple[MassCurve, MassCurve]:
    """Per-frame attention mass from HOI and background queries to reference keys at one layer."""
    cfg = model.cfg
    dtype = next(model.parameters()).dtype
    x0, cond = build_conditioning(samples, cfg)
    x0, cond = x0.to(dtype), cond.to(dtype)
    gen = torch.Generator().manual_seed(seed)
    eps = torch.randn(x0.shape, generator=gen, dtype=torch.float64).to(dtype)
    x_t = (1 - t) * x0 + t * eps
    model.record(taps=False, attention=True)
    model_velocity(model, x_t, cond, torch.full((x0.shape[0],), t, dtype=dtype))
    weights = model.blocks[layer].attn.last_weights
    model.record(taps=False, attention=False)
    hoi = classify_tokens(cond.pooled_mask, cfg.hoi_threshold)
    hoi_curve, bg_curve = reference_mass_by_frame(weights, hoi, cfg.latent_extents[0], cfg.n_ref)
    mode = cfg.rope_kind.value
    return MassCurve("model_hoi", mode, hoi_curve), MassCurve("model_bg", mode, bg_curve)


def mean_scores(scores: Sequence[SampleScores]) -> dict[str, float]:
    return {
        "psnr": float(np.mean([s.psnr for s in scores])),
        "ssim": float(np.mean([s.ssim for s in scores])),
        "oc": float(np.mean([s.oc for s in scores])),
    }


@dataclass
class AblationRow:
    arm: str
    seed: int
    psnr: float
    ssim: float
    oc: float
    final_loss: float
    seconds: float


def run_ablation(
    arms: Sequence[str],
    seeds: Sequence[int],
    train_samples: Sequence[Sample],
    test_samples: Sequence[Sample],
    base: ModelConfig,
    tcfg: TrainConfig,
    n_steps: int = 20,
    on_row=None,
) -> list[AblationRow]:
    """Train and score every (arm, seed); a seed fixes both the init and the data order for all arms."""
    rows = []
    for seed in seeds:
        for arm in arms:
            t0 = time.perf_counter()
            model, state = train_arm(arm, replace(base, seed=seed), train_samples, replace(tcfg, seed=seed))
            sc = mean_scores(evaluate(model, test_samples, n_steps, seed))
            tail = state.losses[-10:]
            row = AblationRow(arm, seed, sc["psnr"], sc["ssim"], sc["oc"], float(np.mean(tail)), time.perf_counter() - t0)
            rows.append(row)
            if on_row is not None:
                on_row(row)
    return rows


def summarize_ablation(rows: Sequence[AblationRow]) -> dict[str, dict[str, float]]:
    out: dict[str, dict[str, float]] = {}
    for arm in dict.fromkeys(r.arm for r in rows):
        sel = [r for r in rows if r.arm == arm]
        out[arm] = {k: float(np.mean([getattr(r, k) for r in sel])) for k in ("psnr", "ssim", "oc")}
    return out
