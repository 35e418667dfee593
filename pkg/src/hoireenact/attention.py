"""Multi-head self-attention over [video ∥ reference] tokens with a hard flow mask
and a per-token soft gate on the updated video tokens.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
from torch import nn

from .numerics import NumericsError, layer_norm, linear, softmax_lastdim
from .rope import FrequencySchedule, RopeMode, apply_rotary

HOI, BACKGROUND, REFERENCE = 0, 1, 2


@dataclass(frozen=True)
class TokenLayout:
    """Canonical ordering: video tokens (frame-major) followed by reference tokens.

    ``hoi_flags`` is bool [..., n_video]; leading dims are batch dims.
    """

    hoi_flags: torch.Tensor
    n_ref: int

    def __post_init__(self) -> None:
        if self.hoi_flags.dtype != torch.bool:
            object.__setattr__(self, "hoi_flags", self.hoi_flags.to(torch.bool))
        if self.n_ref < 0:
            raise NumericsError(f"n_ref must be non-negative, got {self.n_ref}")

    @property
    def n_video(self) -> int:
        return int(self.hoi_flags.shape[-1])

    @property
    def total(self) -> int:
        return self.n_video + self.n_ref

    def groups(self) -> torch.Tensor:
        """Group code per token: HOI, BACKGROUND or REFERENCE, shape [..., total]."""
        vid = torch.where(self.hoi_flags, HOI, BACKGROUND)
        ref = torch.full((*self.hoi_flags.shape[:-1], self.n_ref), REFERENCE, dtype=vid.dtype)
        return torch.cat([vid, ref], dim=-1)

    def without_reference(self) -> "TokenLayout":
        return TokenLayout(self.hoi_flags, 0)


class FlowMask:
    """Rule-based attention mask. Only per-token group codes are stored.

    Blocked pairs: background query -> reference key, and reference query -> any video key.
    """

    def __init__(self, layout: TokenLayout):
        self.groups = layout.groups()

    @staticmethod
    def rule(q_group: torch.Tensor, k_group: torch.Tensor) -> torch.Tensor:
        blocked_bg = (q_group == BACKGROUND) & (k_group == REFERENCE)
        blocked_ref = (q_group == REFERENCE) & (k_group != REFERENCE)
        return ~(blocked_bg | blocked_ref)

    def __call__(self, m: int, n: int) -> int:
        return int(bool(self.rule(self.groups[..., m], self.groups[..., n]).all()))

    def allowed(self) -> torch.Tensor:
        """Broadcastable bool [..., 1, tokens, tokens], built on demand."""
        g = self.groups
        return self.rule(g[..., :, None], g[..., None, :]).unsqueeze(-3)

    def dense(self) -> torch.Tensor:
        """0/1 integer matrix, for diagnostics and tests only."""
        return self.allowed().squeeze(-3).to(torch.int64)


def build_flow_mask(layout: TokenLayout) -> FlowMask:
    return FlowMask(layout)


def masked_attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    mask: Optional[FlowMask],
    scale: float,
    return_weights: bool = False,
):
    """softmax(scale * q k^T + blocked) v with blocked logits set to -inf.

    Inputs are [..., heads, tokens, head_dim].
    """
    if not (q.shape[-2] == k.shape[-2] == v.shape[-2]):
        raise NumericsError(f"token counts differ: q {q.shape}, k {k.shape}, v {v.shape}")
    logits = scale * (q @ k.transpose(-1, -2))
    if mask is not None:
        allowed = mask.allowed()
        if allowed.shape[-1] != logits.shape[-1]:
            raise NumericsError(f"mask over {allowed.shape[-1]} tokens, attention over {logits.shape[-1]}")
        logits = torch.where(allowed, logits, torch.full_like(logits, -math.inf))
    weights = softmax_lastdim(logits)
    out = weights @ v
    return (out, weights) if return_weights else out


class GateParams(nn.Module):
    """LayerNorm affine plus a d_model -> 1 projection; sigmoid of it scales each token."""

    def __init__(self, d_model: int, init_bias: float = 2.0):
        super().__init__()
        self.ln_gamma = nn.Parameter(torch.ones(d_model))
        self.ln_beta = nn.Parameter(torch.zeros(d_model))
        self.fcn_weight = nn.Parameter(torch.zeros(d_model, 1))
        self.fcn_bias = nn.Parameter(torch.full((1,), float(init_bias)))


def soft_flow_gate(video_out: torch.Tensor, params: GateParams, eps: float = 1e-6) -> torch.Tensor:
    h = layer_norm(video_out, params.ln_gamma, params.ln_beta, eps)
    g = torch.sigmoid(linear(h, params.fcn_weight, params.fcn_bias))
    return g * video_out


@dataclass(frozen=True)
class AttentionConfig:
    n_head: int
    head_dim: int
    rope_mode: RopeMode
    gate_enabled: bool = True
    hard_mask_enabled: bool = True

    def __post_init__(self) -> None:
        if self.n_head < 1 or self.head_dim < 1:
            raise NumericsError("n_head and head_dim must be positive")

    @property
    def d_model(self) -> int:
        return self.n_head * self.head_dim

    @property
    def scale(self) -> float:
        return 1.0 / math.sqrt(self.head_dim)


def _init_weight(d_in: int, d_out: int) -> nn.Parameter:
    return nn.Parameter(torch.randn(d_in, d_out) / math.sqrt(d_in))


class GatedBlockAttention(nn.Module):
    """q/k/v projection -> rotary -> masked attention -> output projection -> soft gate on video rows."""

    def __init__(self, config: AttentionConfig):
        super().__init__()
        self.config = config
        d = config.d_model
        self.w_q, self.w_k, self.w_v, self.w_o = (_init_weight(d, d) for _ in range(4))
        self.b_q, self.b_k, self.b_v, self.b_o = (nn.Parameter(torch.zeros(d)) for _ in range(4))
        self.gate = GateParams(d) if config.gate_enabled else None
        self.record_weights = False
        self.last_weights: Optional[torch.Tensor] = None

    def _heads(self, x: torch.Tensor) -> torch.Tensor:
        *lead, t, _ = x.shape
        return x.reshape(*lead, t, self.config.n_head, self.config.head_dim).transpose(-2, -3)

    def forward(
        self,
        tokens: torch.Tensor,
        layout: TokenLayout,
        positions: torch.Tensor,
        freqs: FrequencySchedule,
    ) -> torch.Tensor:
        cfg = self.config
        if tokens.shape[-2] != layout.total:
            raise NumericsError(f"{tokens.shape[-2]} tokens for a layout of {layout.total}")
        q = apply_rotary(self._heads(linear(tokens, self.w_q, self.b_q)), positions, freqs)
        k = apply_rotary(self._heads(linear(tokens, self.w_k, self.b_k)), positions, freqs)
        v = self._heads(linear(tokens, self.w_v, self.b_v))
        mask = build_flow_mask(layout) if cfg.hard_mask_enabled and layout.n_ref > 0 else None
        out, weights = masked_attention(q, k, v, mask, cfg.scale, return_weights=True)
        if self.record_weights:
            self.last_weights = weights.detach()
        merged = out.transpose(-2, -3).reshape(*tokens.shape[:-1], cfg.d_model)
        out = linear(merged, self.w_o, self.b_o)
        if self.gate is None:
            return out
        n_video = layout.n_video
        video = soft_flow_gate(out[..., :n_video, :], self.gate)
        return torch.cat([video, out[..., n_video:, :]], dim=-2)
