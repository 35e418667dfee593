from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import torch
from torch import nn

from ..attention import AttentionConfig, GatedBlockAttention, TokenLayout
from ..hcu import ConditionMode, LatentAssembly, classify_tokens
from ..numerics import NumericsError, layer_norm, linear
from ..rope import RopeKind, RopeMode, build_freqs, head_positions

REFERENCE_MODES = ("none", "tokens", "bbox")


@dataclass(frozen=True)
class ModelConfig:
    n_blocks: int = 4
    n_head: int = 4
    head_dim: int = 16
    mlp_ratio: int = 4
    rope_kind: RopeKind = RopeKind.HEAD_SLIDING
    hard_mask_enabled: bool = True
    gate_enabled: bool = True
    condition_mode: ConditionMode = ConditionMode.FIRST_FRAME
    reference: str = "tokens"  # none | tokens (attention) | bbox (pasted into the reference video)
    latent_extents: tuple[int, int, int] = (8, 8, 8)
    ref_extents: tuple[int, int] = (3, 3)
    stride: int = 2
    rope_base: float = 10000.0
    hoi_threshold: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "rope_kind", RopeKind(self.rope_kind))
        object.__setattr__(self, "condition_mode", ConditionMode(self.condition_mode))
        object.__setattr__(self, "latent_extents", tuple(self.latent_extents))
        object.__setattr__(self, "ref_extents", tuple(self.ref_extents))
        if min(self.n_blocks, self.n_head, self.head_dim, self.mlp_ratio, self.stride) < 1:
            raise NumericsError("model counts must be >= 1")
        if self.reference not in REFERENCE_MODES:
            raise NumericsError(f"reference must be one of {REFERENCE_MODES}, got {self.reference!r}")

    @property
    def d_model(self) -> int:
        return self.n_head * self.head_dim

    @property
    def latent_channels(self) -> int:
        return 3 * self.stride * self.stride

    @property
    def assembly_channels(self) -> int:
        return 2 * self.latent_channels + 1

    @property
    def uses_ref_tokens(self) -> bool:
        return self.reference == "tokens"

    @property
    def n_ref(self) -> int:
        return self.ref_extents[0] * self.ref_extents[1] if self.uses_ref_tokens else 0

    @property
    def rope_mode(self) -> RopeMode:
        return RopeMode(self.rope_kind, self.n_head)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rope_kind"] = self.rope_kind.value
        d["condition_mode"] = self.condition_mode.value
        d["latent_extents"] = list(self.latent_extents)
        d["ref_extents"] = list(self.ref_extents)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class Dense(nn.Module):
    def __init__(self, d_in: int, d_out: int, zero: bool = False):
        super().__init__()
        w = torch.zeros(d_in, d_out) if zero else torch.randn(d_in, d_out) / math.sqrt(d_in)
        self.weight = nn.Parameter(w)
        self.bias = nn.Parameter(torch.zeros(d_out))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return linear(x, self.weight, self.bias)


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = (t.to(torch.float64) * 1000.0)[..., None] * freqs
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class DiTBlock(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.d_model
        self.attn = GatedBlockAttention(
            AttentionConfig(cfg.n_head, cfg.head_dim, cfg.rope_mode, cfg.gate_enabled, cfg.hard_mask_enabled)
        )
        self.mlp_in = Dense(d, cfg.mlp_ratio * d)
        self.mlp_out = Dense(cfg.mlp_ratio * d, d)
        self.modulation = Dense(d, 4 * d, zero=True)

    def forward(self, x, cond, layout, positions, freqs):
        shift1, scale1, shift2, scale2 = self.modulation(nn.functional.silu(cond)).unsqueeze(-2).chunk(4, dim=-1)
        h = layer_norm(x) * (1 + scale1) + shift1
        x = x + self.attn(h, layout, positions, freqs)
        h = layer_norm(x) * (1 + scale2) + shift2
        return x + self.mlp_out(nn.functional.gelu(self.mlp_in(h)))


class ToyDiT(nn.Module):
    """Denoiser over [assembly cells ∥ reference cells] predicting the flow velocity."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        with torch.random.fork_rng():
            torch.manual_seed(cfg.seed)
            self.in_proj = Dense(cfg.assembly_channels, d)
            self.ref_proj = Dense(cfg.latent_channels, d) if cfg.uses_ref_tokens else None
            self.time_in = Dense(d, d)
            self.time_out = Dense(d, d)
            self.blocks = nn.ModuleList(DiTBlock(cfg) for _ in range(cfg.n_blocks))
            self.final_modulation = Dense(d, 2 * d, zero=True)
            self.out_proj = Dense(d, cfg.latent_channels, zero=True)
        self.freqs = build_freqs(cfg.head_dim, cfg.rope_base)
        self.positions = head_positions(
            cfg.latent_extents, cfg.ref_extents if cfg.uses_ref_tokens else None, cfg.rope_mode, cfg.n_head
        )
        self.taps: Optional[list[torch.Tensor]] = None

    def forward(
        self,
        assembly: LatentAssembly | torch.Tensor,
        ref_latent: Optional[torch.Tensor],
        t: torch.Tensor | float,
    ) -> torch.Tensor:
        cfg = self.cfg
        data = assembly.data if isinstance(assembly, LatentAssembly) else assembly
        extents = tuple(data.shape[-4:-1])
        if extents != cfg.latent_extents or data.shape[-1] != cfg.assembly_channels:
            raise NumericsError(
                f"assembly {tuple(data.shape)} does not match latent extents {cfg.latent_extents} "
                f"with {cfg.assembly_channels} channels"
            )
        lead = data.shape[:-4]
        n_video = math.prod(extents)
        hoi = classify_tokens(data[..., -1:], cfg.hoi_threshold)
        tokens = self.in_proj(data.reshape(*lead, n_video, cfg.assembly_channels))
        if cfg.uses_ref_tokens:
            if ref_latent is None or tuple(ref_latent.shape[-3:-1]) != cfg.ref_extents:
                raise NumericsError(f"reference latent must have extents {cfg.ref_extents}")
            ref_tok = self.ref_proj(ref_latent.reshape(*lead, cfg.n_ref, cfg.latent_channels))
            tokens = torch.cat([tokens, ref_tok], dim=-2)
        layout = TokenLayout(hoi, cfg.n_ref)

        t = torch.as_tensor(t, dtype=data.dtype)
        if t.dim() == 0:
            t = t.expand(lead)
        emb = timestep_embedding(t, cfg.d_model).to(data.dtype)
        cond = self.time_out(nn.functional.silu(self.time_in(emb)))

        taps = [] if self.taps is not None else None
        x = tokens
        for block in self.blocks:
            x = block(x, cond, layout, self.positions, self.freqs)
            if taps is not None:
                taps.append(x.detach())
        if taps is not None:
            self.taps = taps
        shift, scale = self.final_modulation(nn.functional.silu(cond)).unsqueeze(-2).chunk(2, dim=-1)
        h = layer_norm(x[..., :n_video, :]) * (1 + scale) + shift
        out = self.out_proj(h)
        return out.reshape(*lead, *extents, cfg.latent_channels)

    def record(self, taps: bool = True, attention: bool = True) -> None:
        """Keep per-block outputs in ``self.taps`` and attention weights on each block."""
        self.taps = [] if taps else None
        for b in self.blocks:
            b.attn.record_weights = attention
            b.attn.last_weights = None


@dataclass
class ParamReport:
    components: dict[str, int] = field(default_factory=dict)
    gate_per_block: list[int] = field(default_factory=list)
    total: int = 0
    overhead: int = 0
    overhead_fraction: float = 0.0


def _count(module: Optional[nn.Module]) -> int:
    return 0 if module is None else sum(p.numel() for p in module.parameters())


def param_report(model: ToyDiT) -> ParamReport:
    comps = {
        "input_projection": _count(model.in_proj),
        "reference_projection": _count(model.ref_proj),
        "timestep_mlp": _count(model.time_in) + _count(model.time_out),
        "attention_projections": 0,
        "gate": 0,
        "mlp": 0,
        "modulation": _count(model.final_modulation),
        "output_projection": _count(model.out_proj),
    }
    gate_per_block = []
    for b in model.blocks:
        g = _count(b.attn.gate)
        gate_per_block.append(g)
        comps["gate"] += g
        comps["attention_projections"] += _count(b.attn) - g
        comps["mlp"] += _count(b.mlp_in) + _count(b.mlp_out)
        comps["modulation"] += _count(b.modulation)
    total = _count(model)
    assert total == sum(comps.values())
    overhead = comps["gate"] + comps["reference_projection"]
    return ParamReport(comps, gate_per_block, total, overhead, overhead / total)
