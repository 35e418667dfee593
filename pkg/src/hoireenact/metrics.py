"""PSNR, uniform-window SSIM, a pixel-space object-consistency proxy and
attention-decay diagnostics. All metrics evaluate in float64 numpy.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
import torch
from numpy.lib.stride_tricks import sliding_window_view

from .numerics import NumericsError
from .rope import ResponseCurve

PEAK = 2.0
PSNR_CAP = 99.0
SSIM_WINDOW = 7


def _np(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def _same_extents(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise NumericsError(f"extent mismatch: {a.shape} vs {b.shape}")


def psnr(a, b) -> float:
    a, b = _np(a), _np(b)
    _same_extents(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(PEAK**2 / mse))


def ssim(a, b) -> float:
    """Mean SSIM over frames and channels of [F, H, W, C] clips (7x7 uniform window, valid region)."""
    a, b = _np(a), _np(b)
    _same_extents(a, b)
    if a.ndim == 3:
        a, b = a[None], b[None]
    c1, c2 = (0.01 * PEAK) ** 2, (0.03 * PEAK) ** 2
    win = min(SSIM_WINDOW, a.shape[1], a.shape[2])

    def local_mean(x: np.ndarray) -> np.ndarray:
        return sliding_window_view(x, (win, win), axis=(1, 2)).mean(axis=(-2, -1))

    mu_a, mu_b = local_mean(a), local_mean(b)
    var_a = local_mean(a * a) - mu_a * mu_a
    var_b = local_mean(b * b) - mu_b * mu_b
    cov = local_mean(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def _bbox(mask_frame: np.ndarray) -> tuple[int, int, int, int]:
    ys, xs = np.nonzero(mask_frame > 0)
    if ys.size == 0:
        raise NumericsError("empty mask frame")
    return int(ys.min()), int(xs.min()), int(ys.max()) + 1, int(xs.max()) + 1


def _resize_nearest(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = img.shape[:2]
    return img[(np.arange(out_h) * h) // out_h][:, (np.arange(out_w) * w) // out_w]


def _centered_cosine(x: np.ndarray, y: np.ndarray) -> float:
    x = x.ravel() - x.mean()
    y = y.ravel() - y.mean()
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    if nx == 0.0 or ny == 0.0:
        return 0.0
    return float(np.dot(x, y) / (nx * ny))


def object_consistency(video, mask, ref_image) -> float:
    """Mean over frames of the centred cosine between the resized mask-bbox crop and the reference."""
    v, m, ref = _np(video), _np(mask), _np(ref_image)
    if ref.ndim == 4:
        ref = ref[0]
    rh, rw = ref.shape[:2]
    scores = []
    for f in range(v.shape[0]):
        try:
            top, left, bottom, right = _bbox(m[f])
        except NumericsError:
            raise NumericsError(f"object_consistency: empty mask on frame {f}") from None
        crop = _resize_nearest(v[f, top:bottom, left:right], rh, rw)
        scores.append(_centered_cosine(crop, ref))
    return float(np.mean(scores))


@dataclass
class MetricReport:
    metric: str
    config_hash: str
    seed: int
    per_sample: list[tuple[str, float]] = field(default_factory=list)

    @property
    def aggregate(self) -> float:
        return float(np.mean([v for _, v in self.per_sample])) if self.per_sample else float("nan")

    def rows(self, extra: dict) -> list[list]:
        head = ["1", self.config_hash, self.seed, self.metric, *extra.values()]
        body = [head + [name, repr(val)] for name, val in self.per_sample]
        return body + [head + ["mean", repr(self.aggregate)]]

    def write_csv(self, out_dir: str | Path, extra_columns: Optional[dict] = None) -> Path:
        return write_reports_csv(out_dir, [(extra_columns or {}, self)])


def write_reports_csv(out_dir: str | Path, reports: list[tuple[dict, MetricReport]]) -> Path:
    """One file per metric: ``{metric}_{config_hash}.csv``, one block of rows per report."""
    first = reports[0][1]
    if any(r.metric != first.metric or r.config_hash != first.config_hash for _, r in reports):
        raise NumericsError("reports written to one file must share metric and config hash")
    path = Path(out_dir) / f"{first.metric}_{first.config_hash}.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["schema", "config_hash", "seed", "metric", *reports[0][0].keys(), "sample", "value"])
        for extra, rep in reports:
            w.writerows(rep.rows(extra))
    return path


@dataclass
class MassCurve:
    source: str
    mode: str
    mean_mass: np.ndarray  # [F]

    @property
    def cv(self) -> float:
        m = float(self.mean_mass.mean())
        return float(self.mean_mass.std() / abs(m)) if m != 0.0 else 0.0


def reference_mass_by_frame(
    weights: torch.Tensor, hoi_flags: torch.Tensor, n_frames: int, n_ref: int
) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame attention mass to reference keys for HOI and background queries.

    ``weights`` is [B, heads, T, T] post-softmax, ``hoi_flags`` [B, n_video]. Mass is
    summed over reference keys, averaged over heads and over the queries of each frame
    (batch-pooled). Frames with no queries of a group report 0.
    """
    w = _np(weights)
    hoi = _np(hoi_flags).astype(bool)
    if w.ndim == 3:
        w, hoi = w[None], hoi[None]
    n_video = hoi.shape[-1]
    mass = w[:, :, :n_video, n_video : n_video + n_ref].sum(-1).mean(1)  # [B, n_video]
    per_frame = n_video // n_frames
    hoi_curve, bg_curve = np.zeros(n_frames), np.zeros(n_frames)
    for f in range(n_frames):
        sl = slice(f * per_frame, (f + 1) * per_frame)
        m, h = mass[:, sl], hoi[:, sl]
        hoi_curve[f] = m[h].mean() if h.any() else 0.0
        bg_curve[f] = m[~h].mean() if (~h).any() else 0.0
    return hoi_curve, bg_curve


def export_decay_csv(
    path: str | Path,
    rope_curves: Iterable[ResponseCurve] = (),
    mass_curves: Iterable[MassCurve] = (),
    config_hash: str = "",
) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["config_hash", "source", "mode", "frame", "mean_mass", "cv"])
        for c in rope_curves:
            for f, v in enumerate(c.mean_logit):
                w.writerow([config_hash, "rope_mc", c.mode.value, f, repr(float(v)), repr(c.cv)])
        for c in mass_curves:
            for f, v in enumerate(c.mean_mass):
                w.writerow([config_hash, c.source, c.mode, f, repr(float(v)), repr(c.cv)])
    return path
