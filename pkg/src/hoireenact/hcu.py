"""HOI condition unit: masked reference video, mask pooling, a lossless space-to-channel
codec standing in for the VAE, channel-wise latent assembly and token classification.

Videos are float tensors [F, H, W, 3] in [-1, 1]; masks are [F, H, W] in {0, 1}.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .numerics import NumericsError, load_array, save_array

FILL_VALUE = 0.0  # normalized-space fill for masked pixels


class ConditionMode(str, enum.Enum):
    FIRST_FRAME = "first_frame"
    FIRST_LAST_FRAME = "first_last_frame"


def clean_frames(n_frames: int, mode: ConditionMode) -> list[int]:
    mode = ConditionMode(mode)
    if mode is ConditionMode.FIRST_LAST_FRAME and n_frames > 1:
        return [0, n_frames - 1]
    return [0]


def _check_pair(v: torch.Tensor, mask: torch.Tensor) -> None:
    if v.dim() != 4 or v.shape[-1] != 3:
        raise NumericsError(f"video must be [F, H, W, 3], got {tuple(v.shape)}")
    if tuple(mask.shape) != tuple(v.shape[:3]):
        raise NumericsError(f"mask extents {tuple(mask.shape)} do not match video {tuple(v.shape[:3])}")


def make_reference_video(
    v: torch.Tensor, mask: torch.Tensor, mode: ConditionMode = ConditionMode.FIRST_FRAME
) -> torch.Tensor:
    """Blank the masked region of every non-clean frame with the fill value."""
    _check_pair(v, mask)
    fill = torch.full_like(v, FILL_VALUE)
    return _compose(v, mask, fill, mode)


def _compose(v: torch.Tensor, mask: torch.Tensor, fill: torch.Tensor, mode: ConditionMode) -> torch.Tensor:
    m = (mask > 0).unsqueeze(-1)
    out = torch.where(m, fill, v)
    for f in clean_frames(v.shape[0], mode):
        out[f] = v[f]
    return out


def pool_mask(mask: torch.Tensor, stride: int) -> torch.Tensor:
    """Average-pool [F, H, W] over stride x stride blocks -> [F, H/s, W/s, 1]."""
    f, h, w = mask.shape
    if h % stride or w % stride:
        raise NumericsError(f"mask extents {(h, w)} not divisible by stride {stride}")
    blocks = mask.reshape(f, h // stride, stride, w // stride, stride)
    return blocks.mean(dim=(2, 4)).unsqueeze(-1)


def encode_stub(v: torch.Tensor, stride: int = 2) -> torch.Tensor:
    """Space-to-channel: each s x s x 3 block becomes 3 s^2 channels ordered (dy, dx, c)."""
    *lead, h, w, c = v.shape
    if h % stride or w % stride:
        raise NumericsError(f"extents {(h, w)} not divisible by stride {stride}")
    x = v.reshape(*lead, h // stride, stride, w // stride, stride, c)
    n = len(lead)
    x = x.permute(*range(n), n, n + 2, n + 1, n + 3, n + 4)
    return x.reshape(*lead, h // stride, w // stride, stride * stride * c)


def decode_stub(latent: torch.Tensor, stride: int = 2) -> torch.Tensor:
    *lead, hl, wl, ch = latent.shape
    c = ch // (stride * stride)
    if c * stride * stride != ch:
        raise NumericsError(f"{ch} latent channels not divisible by stride^2 = {stride * stride}")
    x = latent.reshape(*lead, hl, wl, stride, stride, c)
    n = len(lead)
    x = x.permute(*range(n), n, n + 2, n + 1, n + 3, n + 4)
    return x.reshape(*lead, hl * stride, wl * stride, c)


@dataclass
class LatentAssembly:
    data: torch.Tensor  # [..., F, H_lat, W_lat, C_noise + C_ref + 1]
    manifest: dict = field(default_factory=dict)

    def slices(self) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        c_noise, c_ref, c_mask = self.manifest["channels"]
        d = self.data
        return (
            d[..., :c_noise],
            d[..., c_noise : c_noise + c_ref],
            d[..., c_noise + c_ref : c_noise + c_ref + c_mask],
        )


def layout_manifest(c_noise: int, c_ref: int) -> dict:
    return {"order": ["noisy", "reference", "mask"], "channels": [c_noise, c_ref, 1]}


def assemble_latent(x_t: torch.Tensor, ref_latent: torch.Tensor, pooled_mask: torch.Tensor) -> LatentAssembly:
    if x_t.shape[:-1] != ref_latent.shape[:-1] or x_t.shape[:-1] != pooled_mask.shape[:-1]:
        raise NumericsError(
            f"extent mismatch: noisy {tuple(x_t.shape)}, reference {tuple(ref_latent.shape)}, "
            f"mask {tuple(pooled_mask.shape)}"
        )
    if pooled_mask.shape[-1] != 1:
        raise NumericsError("pooled mask must have a single channel")
    data = torch.cat([x_t, ref_latent, pooled_mask.to(x_t.dtype)], dim=-1)
    return LatentAssembly(data, layout_manifest(x_t.shape[-1], ref_latent.shape[-1]))


def classify_tokens(pooled_mask: torch.Tensor, threshold: float = 0.0) -> torch.Tensor:
    """HOI flag per latent token (frame-major), true iff pooled value > threshold."""
    if not 0.0 <= threshold < 1.0:
        raise NumericsError(f"threshold must be in [0, 1), got {threshold}")
    pm = pooled_mask[..., 0] if pooled_mask.shape[-1] == 1 else pooled_mask
    return (pm > threshold).reshape(*pm.shape[:-3], -1)


def mask_bbox(mask_frame: torch.Tensor) -> tuple[int, int, int, int]:
    """(top, left, bottom, right) of the non-zero pixels, bottom/right exclusive."""
    ys, xs = torch.nonzero(mask_frame > 0, as_tuple=True)
    if ys.numel() == 0:
        raise NumericsError("empty mask frame")
    return int(ys.min()), int(xs.min()), int(ys.max()) + 1, int(xs.max()) + 1


def resize_nearest(img: torch.Tensor, out_h: int, out_w: int) -> torch.Tensor:
    """Nearest-neighbour resize of [H, W, C]; source index = floor(i * H / out_h)."""
    h, w = img.shape[:2]
    rows = (torch.arange(out_h) * h) // out_h
    cols = (torch.arange(out_w) * w) // out_w
    return img[rows][:, cols]


def ref_in_bbox(
    v: torch.Tensor,
    mask: torch.Tensor,
    ref: torch.Tensor,
    mode: ConditionMode = ConditionMode.FIRST_FRAME,
) -> torch.Tensor:
    """Paste the reference image, resized to each frame's mask bbox, where mask = 1."""
    _check_pair(v, mask)
    if ref.dim() == 4:
        ref = ref[0]
    keep = set(clean_frames(v.shape[0], mode))
    fill = torch.zeros_like(v)
    for f in range(v.shape[0]):
        if f in keep:
            continue
        try:
            top, left, bottom, right = mask_bbox(mask[f])
        except NumericsError:
            raise NumericsError(f"ref_in_bbox: empty mask on frame {f}") from None
        fill[f, top:bottom, left:right] = resize_nearest(ref, bottom - top, right - left).to(v.dtype)
    return _compose(v, mask, fill, mode)


def save_video(path: str | Path, x: torch.Tensor, kind: str) -> None:
    """RealArray file at ``path`` plus a ``path.json`` sidecar with kind and extents."""
    if kind not in ("video", "mask"):
        raise NumericsError(f"unknown kind {kind!r}")
    path = Path(path)
    save_array(path, x)
    extents = list(x.shape[:3]) if x.dim() >= 3 else list(x.shape)
    Path(str(path) + ".json").write_text(json.dumps({"kind": kind, "extents": extents}))


def load_video(path: str | Path) -> tuple[torch.Tensor, str]:
    path = Path(path)
    meta = json.loads(Path(str(path) + ".json").read_text())
    x = load_array(path)
    if list(x.shape[: len(meta["extents"])]) != meta["extents"]:
        raise NumericsError(f"{path}: sidecar extents {meta['extents']} disagree with array {list(x.shape)}")
    return x, meta["kind"]
