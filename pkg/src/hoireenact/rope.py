"""3D rotary position embedding for joint video + reference token sequences.

Video tokens sit on a (frame, height, width) grid. Reference tokens either share
frame 0 with the video (``VIDEO_ONLY``), live at frame -1 with spatial coordinates
shifted past the video grid (``SEPARATE_REF``), or get a per-head frame index that
slides across the clip (``HEAD_SLIDING``).
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import torch

from .numerics import NumericsError


class RopeKind(str, enum.Enum):
    VIDEO_ONLY = "video_only"
    SEPARATE_REF = "separate_ref"
    HEAD_SLIDING = "head_sliding"


@dataclass(frozen=True)
class RopeMode:
    kind: RopeKind
    n_head: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", RopeKind(self.kind))
        if self.n_head < 1:
            raise NumericsError(f"n_head must be >= 1, got {self.n_head}")


@dataclass(frozen=True)
class FrequencySchedule:
    head_dim: int
    pair_split: tuple[int, int, int]
    base: float
    theta_f: torch.Tensor
    theta_h: torch.Tensor
    theta_w: torch.Tensor

    @property
    def theta(self) -> torch.Tensor:
        """All pair frequencies in channel order (frame block, height block, width block)."""
        return torch.cat([self.theta_f, self.theta_h, self.theta_w])

    @property
    def pair_axis(self) -> torch.Tensor:
        pf, ph, pw = self.pair_split
        return torch.tensor([0] * pf + [1] * ph + [2] * pw, dtype=torch.long)


@dataclass(frozen=True)
class PositionGrid:
    coords: torch.Tensor  # [tokens, 3] int64 (f, h, w)
    is_ref: torch.Tensor  # [tokens] bool

    def __len__(self) -> int:
        return int(self.coords.shape[0])

    def concat(self, other: "PositionGrid") -> "PositionGrid":
        return PositionGrid(torch.cat([self.coords, other.coords]), torch.cat([self.is_ref, other.is_ref]))


def _axis_theta(pairs: int, base: float) -> torch.Tensor:
    i = torch.arange(pairs, dtype=torch.float64)
    return base ** (-2.0 * i / (2.0 * pairs)) if pairs else torch.zeros(0, dtype=torch.float64)


def build_freqs(head_dim: int, base: float = 10000.0) -> FrequencySchedule:
    if head_dim < 6 or head_dim % 2:
        raise NumericsError(f"head_dim must be even and >= 6, got {head_dim}")
    if base <= 0:
        raise NumericsError(f"base must be positive, got {base}")
    p = head_dim // 2
    split = (p - 2 * (p // 3), p // 3, p // 3)
    return FrequencySchedule(
        head_dim=head_dim,
        pair_split=split,
        base=float(base),
        theta_f=_axis_theta(split[0], base),
        theta_h=_axis_theta(split[1], base),
        theta_w=_axis_theta(split[2], base),
    )


def video_positions(n_f: int, h_v: int, w_v: int) -> PositionGrid:
    if min(n_f, h_v, w_v) < 1:
        raise NumericsError(f"video extents must be positive, got {(n_f, h_v, w_v)}")
    f, h, w = torch.meshgrid(
        torch.arange(n_f), torch.arange(h_v), torch.arange(w_v), indexing="ij"
    )
    coords = torch.stack([f.reshape(-1), h.reshape(-1), w.reshape(-1)], dim=-1)
    return PositionGrid(coords, torch.zeros(coords.shape[0], dtype=torch.bool))


def head_slide_offset(n_f: int, n_head: int, head_index: int) -> int:
    """ceil(n_f * head_index / n_head) in exact integer arithmetic, clamped to the last frame.

    The clamp only binds when n_head > n_f.
    """
    return min(-((-n_f * head_index) // n_head), n_f - 1)


def reference_positions(
    ref_grid: tuple[int, int],
    video_extents: tuple[int, int, int],
    mode: RopeMode,
    head_index: Optional[int] = None,
) -> PositionGrid:
    h_i, w_i = ref_grid
    n_f, h_v, w_v = video_extents
    if min(h_i, w_i) < 1:
        raise NumericsError(f"reference grid must be positive, got {ref_grid}")
    hh, ww = torch.meshgrid(torch.arange(h_i), torch.arange(w_i), indexing="ij")
    hh, ww = hh.reshape(-1), ww.reshape(-1)

    if mode.kind is RopeKind.VIDEO_ONLY:
        frame = 0
    else:
        hh, ww = hh + h_v, ww + w_v
        if mode.kind is RopeKind.SEPARATE_REF:
            frame = -1
        else:
            if head_index is None:
                raise NumericsError("head_index is required in head-sliding mode")
            if not 0 <= head_index < mode.n_head:
                raise NumericsError(f"head_index {head_index} outside [0, {mode.n_head})")
            frame = head_slide_offset(n_f, mode.n_head, head_index)
    ff = torch.full_like(hh, frame)
    coords = torch.stack([ff, hh, ww], dim=-1)
    return PositionGrid(coords, torch.ones(coords.shape[0], dtype=torch.bool))


def head_positions(
    video_extents: tuple[int, int, int],
    ref_grid: Optional[tuple[int, int]],
    mode: RopeMode,
    n_head: int,
) -> torch.Tensor:
    """Per-head coordinates for [video ∥ reference] tokens, shape [n_head, tokens, 3]."""
    vid = video_positions(*video_extents)
    grids = []
    for n in range(n_head):
        grid = vid
        if ref_grid is not None:
            head_mode = RopeMode(mode.kind, n_head) if mode.kind is RopeKind.HEAD_SLIDING else mode
            grid = vid.concat(reference_positions(ref_grid, video_extents, head_mode, n))
        grids.append(grid.coords)
    return torch.stack(grids)


def _angles(positions: torch.Tensor, freqs: FrequencySchedule) -> torch.Tensor:
    pos = positions.to(torch.float64)[..., freqs.pair_axis]  # [..., tokens, P]
    return pos * freqs.theta


def apply_rotary(
    x: torch.Tensor,
    positions: torch.Tensor | Sequence[PositionGrid],
    freqs: FrequencySchedule,
) -> torch.Tensor:
    """Rotate channel pairs (2i, 2i+1) of ``x`` [..., heads, tokens, head_dim].

    ``positions`` is either an int tensor [heads, tokens, 3] or one PositionGrid per head.
    Angles are formed in float64 and cast to ``x.dtype``.
    """
    if not isinstance(positions, torch.Tensor):
        positions = torch.stack([g.coords for g in positions])
    if x.shape[-1] != freqs.head_dim:
        raise NumericsError(f"head_dim {x.shape[-1]} does not match schedule {freqs.head_dim}")
    if positions.shape[-2] != x.shape[-2]:
        raise NumericsError(f"{positions.shape[-2]} positions for {x.shape[-2]} tokens")
    ang = _angles(positions, freqs)
    cos = torch.cos(ang).to(x.dtype)
    sin = torch.sin(ang).to(x.dtype)
    xe, xo = x[..., 0::2], x[..., 1::2]
    out_e = xe * cos - xo * sin
    out_o = xe * sin + xo * cos
    return torch.stack([out_e, out_o], dim=-1).flatten(-2)


@dataclass
class ResponseCurve:
    mode: RopeKind
    head_count: int
    mean_logit: np.ndarray  # [n_f]
    cv: float


def measure_ref_response(
    mode: RopeMode,
    extents: tuple[int, int, int],
    freqs: FrequencySchedule,
    trials: int = 10_000,
    seed: int = 0,
    ref_grid: tuple[int, int] = (1, 1),
    probe_hw: tuple[int, int] = (0, 0),
    correlation: float = 0.8,
) -> ResponseCurve:
    """Monte-Carlo mean of the scaled logit between a reference key and per-frame probes.

    Each trial draws a base vector per head; the key at the (first) reference position
    is a correlated copy of it and the queries at (f, h0, w0) are the base vector
    itself. The same draws are reused for every frame. Head-sliding averages the
    logit over all heads.
    """
    if trials < 100:
        raise NumericsError(f"trials must be >= 100, got {trials}")
    n_f = extents[0]
    d = freqs.head_dim
    n_head = mode.n_head if mode.kind is RopeKind.HEAD_SLIDING else 1
    rng = np.random.default_rng(seed)
    probe = torch.tensor([[f, probe_hw[0], probe_hw[1]] for f in range(n_f)], dtype=torch.long)

    per_head = []
    for n in range(n_head):
        base = torch.from_numpy(rng.standard_normal((trials, d)))
        noise = torch.from_numpy(rng.standard_normal((trials, d)))
        key = correlation * base + np.sqrt(1.0 - correlation**2) * noise
        ref = reference_positions(ref_grid, extents, mode, n if mode.kind is RopeKind.HEAD_SLIDING else None)
        k_rot = apply_rotary(key[:, None, :], ref.coords[:1], freqs)  # [trials, 1, d]
        q_rot = apply_rotary(base[:, None, :].expand(trials, n_f, d), probe, freqs)  # [trials, n_f, d]
        logits = (q_rot * k_rot).sum(-1) / np.sqrt(d)
        per_head.append(logits.mean(0))
    curve = torch.stack(per_head).mean(0).numpy()
    cv = float(curve.std() / abs(curve.mean()))
    return ResponseCurve(mode.kind, n_head, curve, cv)


def write_response_csv(path: str | Path, curves: Iterable[ResponseCurve]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mode", "head_count", "frame", "mean_logit"])
        for c in curves:
            for f, v in enumerate(c.mean_logit):
                w.writerow([c.mode.value, c.head_count, f, repr(float(v))])
            w.writerow([c.mode.value, c.head_count, "cv", repr(c.cv)])
