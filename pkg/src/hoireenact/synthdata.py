"""Deterministic synthetic hand-object interaction clips.

A textured square object rides a sinusoidal path over a static background while a
round "hand" blob stays tangent to its left edge. Masks are the dilated union of
hand and object. Everything is a pure function of (SceneSpec, seed).
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from scipy import ndimage

from .hcu import load_video, save_video

HAND_COLOR = np.array([0.8, 0.3, 0.1])
LOGO = np.array([[1.0, -1.0], [-1.0, 1.0]])

_M64 = np.uint64(0xFFFFFFFFFFFFFFFF)


class SceneError(ValueError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    canvas: tuple[int, int] = (48, 48)
    frames: int = 16
    object_size: tuple[int, int] = (12, 12)
    texture_seed: Optional[int] = None  # None: derived from the sample seed
    amplitude: float = 6.0
    frequency: float = 1.0
    phase: float = 0.0
    randomize_phase: bool = True
    hand_radius: int = 5
    dilation: int = 2
    background: int = 0
    texel: int = 2
    texture_contrast: float = 0.3
    snap: int = 1
    ref_pad: int = 0

    def validate(self) -> None:
        if self.frames < 4:
            raise SceneError(f"need at least 4 frames, got {self.frames}")
        h, w = self.canvas
        oh, ow = self.object_size
        if min(h, w, oh, ow) < 1 or self.texel < 1 or self.snap < 1 or self.hand_radius < 0 or self.dilation < 0:
            raise SceneError("extents, texel size, snap and radii must be positive")
        if not 0.0 <= self.texture_contrast <= 1.0:
            raise SceneError("texture_contrast must be in [0, 1]")
        # worst case over any phase: the whole circle of centers must keep hand+object inside
        cy, cx = _base_center(self)
        a = int(np.ceil(self.amplitude))
        top, bottom = int(np.floor(cy - oh / 2 + 0.5)) - a, int(np.floor(cy - oh / 2 + 0.5)) + a + oh
        left = int(np.floor(cx - ow / 2 + 0.5)) - a - 2 * self.hand_radius - 1
        right = int(np.floor(cx - ow / 2 + 0.5)) + a + ow
        if top < 0 or left < 0 or bottom > h or right > w:
            raise SceneError(
                f"trajectory leaves the {h}x{w} canvas (rows {top}..{bottom}, cols {left}..{right})"
            )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["canvas"], d["object_size"] = list(self.canvas), list(self.object_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        for k in ("canvas", "object_size"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


TOY_SCENE = SceneSpec(
    canvas=(16, 16), frames=8, object_size=(6, 6), amplitude=2.0, hand_radius=2, dilation=1, snap=2
)


@dataclass
class Sample:
    video: torch.Tensor  # [F, H, W, 3]
    mask: torch.Tensor  # [F, H, W]
    ref_image: torch.Tensor  # [1, h, w, 3]
    trajectory: np.ndarray  # [F, 2] object centre (row, col)
    spec: SceneSpec
    seed: int
    texture_seed: int
    object_support: torch.Tensor = field(repr=False, default=None)  # [F, H, W] bool


def _splitmix(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        x = (x + np.uint64(0x9E3779B97F4A7C15)) & _M64
        x = ((x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)) & _M64
        x = ((x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)) & _M64
        return x ^ (x >> np.uint64(31))


def texel_values(seed: int, rows: int, cols: int, offset: int = 0) -> np.ndarray:
    """Counter-based uniform values in [-1, 1], keyed by (seed, u, v, channel)."""
    u, v, c = np.meshgrid(np.arange(rows) + offset, np.arange(cols) + offset, np.arange(3), indexing="ij")
    with np.errstate(over="ignore"):
        key = (
            np.uint64(seed & 0xFFFFFFFF) * np.uint64(0x100000001B3)
            ^ (u.astype(np.uint64) << np.uint64(40))
            ^ (v.astype(np.uint64) << np.uint64(20))
            ^ c.astype(np.uint64)
        )
    h = _splitmix(_splitmix(key))
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53) * 2.0 - 1.0


def object_texture(spec: SceneSpec, texture_seed: int) -> np.ndarray:
    """Base colour plus per-texel variation of amplitude ``texture_contrast``, with a logo corner."""
    oh, ow = spec.object_size
    t = spec.texel
    base = 0.8 * texel_values(texture_seed, 1, 1, offset=1 << 19)[0, 0]
    var = texel_values(texture_seed, -(-oh // t), -(-ow // t))
    tex = np.clip(base + spec.texture_contrast * var, -1.0, 1.0)
    tex = np.repeat(np.repeat(tex, t, axis=0), t, axis=1)[:oh, :ow]
    lh, lw = min(2, oh), min(2, ow)
    tex[:lh, :lw] = LOGO[:lh, :lw, None]
    return tex


def background_image(spec: SceneSpec, seed: int) -> np.ndarray:
    h, w = spec.canvas
    yy, xx = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")
    tint = np.random.default_rng([seed, 0xB6]).uniform(-0.4, 0.4, size=3)
    if spec.background == 0:
        base = 0.5 * (yy - 0.5)[..., None] + 0.3 * np.sin(2 * np.pi * xx)[..., None]
    elif spec.background == 1:
        base = 0.4 * np.sign(np.sin(3 * np.pi * (xx + yy)))[..., None]
    else:
        raise SceneError(f"unknown background pattern {spec.background}")
    return np.clip(base + tint, -1.0, 1.0)


def _base_center(spec: SceneSpec) -> tuple[float, float]:
    h, w = spec.canvas
    return h / 2.0, (w + 2 * spec.hand_radius + 1) / 2.0


def _top_left(spec: SceneSpec, cy: float, cx: float) -> tuple[int, int]:
    oh, ow = spec.object_size
    top, left = np.floor(cy - oh / 2 + 0.5), np.floor(cx - ow / 2 + 0.5)
    return int(spec.snap * np.floor(top / spec.snap + 0.5)), int(spec.snap * np.floor(left / spec.snap + 0.5))


def trajectory(spec: SceneSpec, seed: int) -> np.ndarray:
    phase = spec.phase
    if spec.randomize_phase:
        phase += float(np.random.default_rng([seed, 0x7A]).uniform(0.0, 2 * np.pi))
    cy, cx = _base_center(spec)
    f = np.arange(spec.frames)
    ang = 2 * np.pi * spec.frequency * f / spec.frames + phase
    return np.stack([cy + spec.amplitude * np.cos(ang), cx + spec.amplitude * np.sin(ang)], axis=-1)


def _render(spec: SceneSpec, seed: int, texture_seed: int) -> Sample:
    spec.validate()
    h, w = spec.canvas
    oh, ow = spec.object_size
    r = spec.hand_radius
    bg = background_image(spec, seed)
    tex = object_texture(spec, texture_seed)
    traj = trajectory(spec, seed)

    video = np.repeat(bg[None], spec.frames, axis=0)
    support = np.zeros((spec.frames, h, w), dtype=bool)
    hand = np.zeros_like(support)
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    for f, (cy, cx) in enumerate(traj):
        top, left = _top_left(spec, cy, cx)
        hy, hx = top + oh // 2, left - 1 - r
        if top < 0 or top + oh > h or left + ow > w or hx - r < 0 or hy - r < 0 or hy + r >= h:
            raise SceneError(f"frame {f}: object or hand leaves the canvas")
        video[f, top : top + oh, left : left + ow] = tex
        support[f, top : top + oh, left : left + ow] = True
        disc = (yy - hy) ** 2 + (xx - hx) ** 2 <= r * r
        hand[f] = disc
        video[f][disc] = HAND_COLOR

    k = 2 * spec.dilation + 1
    struct = np.ones((1, k, k), dtype=bool)
    mask = ndimage.binary_dilation(support | hand, structure=struct) if spec.dilation else support | hand

    p = spec.ref_pad
    ref = np.zeros((oh + 2 * p, ow + 2 * p, 3))
    ref[p : p + oh, p : p + ow] = tex
    return Sample(
        video=torch.from_numpy(video.astype(np.float32)),
        mask=torch.from_numpy(mask.astype(np.float32)),
        ref_image=torch.from_numpy(ref[None].astype(np.float32)),
        trajectory=traj,
        spec=spec,
        seed=seed,
        texture_seed=texture_seed,
        object_support=torch.from_numpy(support),
    )


def gen_sample(spec: SceneSpec, seed: int) -> Sample:
    tex_seed = spec.texture_seed if spec.texture_seed is not None else seed
    return _render(spec, seed, tex_seed)


def cross_pair(sample: Sample, donor_seed: int) -> Sample:
    """Same geometry and background, object texture drawn from ``donor_seed``."""
    return _render(sample.spec, sample.seed, donor_seed)


def derive_seed(master_seed: int, index: int) -> int:
    digest = hashlib.blake2b(f"{master_seed}:{index}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") & 0x7FFFFFFF


def gen_dataset(n: int, spec: SceneSpec, master_seed: int) -> list[Sample]:
    if n < 1:
        raise SceneError("dataset size must be >= 1")
    return [gen_sample(spec, derive_seed(master_seed, i)) for i in range(n)]


def write_dataset(root: str | Path, samples: list[Sample], master_seed: int) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(samples):
        d = root / f"sample_{i}"
        d.mkdir(exist_ok=True)
        save_video(d / "video", s.video, "video")
        save_video(d / "mask", s.mask, "mask")
        save_video(d / "ref", s.ref_image, "video")
        save_video(d / "object", s.object_support.float(), "mask")
        with open(d / "trajectory.csv", "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["frame", "row", "col"])
            for f, (y, x) in enumerate(s.trajectory):
                wr.writerow([f, repr(float(y)), repr(float(x))])
    manifest = {
        "n": len(samples),
        "master_seed": master_seed,
        "spec": samples[0].spec.to_dict(),
        "seeds": [s.seed for s in samples],
        "texture_seeds": [s.texture_seed for s in samples],
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def read_dataset(root: str | Path) -> list[Sample]:
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    spec = SceneSpec.from_dict(manifest["spec"])
    out = []
    for i, (seed, tseed) in enumerate(zip(manifest["seeds"], manifest["texture_seeds"])):
        d = root / f"sample_{i}"
        video, _ = load_video(d / "video")
        mask, _ = load_video(d / "mask")
        ref, _ = load_video(d / "ref")
        support, _ = load_video(d / "object")
        traj = np.loadtxt(d / "trajectory.csv", delimiter=",", skiprows=1)[:, 1:].reshape(-1, 2)
        out.append(Sample(video, mask, ref, traj, spec, seed, tseed, support > 0))
    return out


def with_spec(spec: SceneSpec, **changes) -> SceneSpec:
    return replace(spec, **changes)
