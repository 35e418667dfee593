"""Dense-array kernels, finite-difference gradient checking and array serialization.

Arrays are ``torch.Tensor`` objects; reverse-mode differentiation is torch autograd.
Training runs in float32, every verification path in float64.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

_PRECISION_TO_DTYPE = {"f32": torch.float32, "f64": torch.float64}
_DTYPE_TO_PRECISION = {v: k for k, v in _PRECISION_TO_DTYPE.items()}


class NumericsError(ValueError):
    """Raised on shape mismatches, invalid arguments or non-finite values."""


def check_finite(x: torch.Tensor, where: str) -> None:
    if not bool(torch.isfinite(x).all()):
        raise NumericsError(f"non-finite values in {where}")


def linear(x: torch.Tensor, weight: torch.Tensor, bias: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Affine map ``x @ weight + bias`` with ``weight`` stored as [d_in, d_out]."""
    if weight.dim() != 2 or x.shape[-1] != weight.shape[0]:
        raise NumericsError(
            f"linear: input shape {tuple(x.shape)} incompatible with weight shape {tuple(weight.shape)}"
        )
    if bias is not None and bias.shape != (weight.shape[1],):
        raise NumericsError(
            f"linear: bias shape {tuple(bias.shape)} incompatible with weight shape {tuple(weight.shape)}"
        )
    out = x @ weight
    if bias is not None:
        out = out + bias
    return out


def layer_norm(
    x: torch.Tensor,
    gamma: Optional[torch.Tensor] = None,
    beta: Optional[torch.Tensor] = None,
    eps: float = 1e-6,
) -> torch.Tensor:
    """Per-token normalization over the last dim, followed by an optional affine."""
    if eps <= 0:
        raise NumericsError(f"layer_norm: eps must be positive, got {eps}")
    if x.shape[-1] < 1:
        raise NumericsError("layer_norm: last dimension must be non-empty")
    mean = x.mean(dim=-1, keepdim=True)
    centered = x - mean
    var = (centered * centered).mean(dim=-1, keepdim=True)
    out = centered / torch.sqrt(var + eps)
    if gamma is not None:
        out = out * gamma
    if beta is not None:
        out = out + beta
    return out


def softmax_lastdim(x: torch.Tensor) -> torch.Tensor:
    """Stable softmax over the last dim; ``-inf`` logits get a weight of exactly 0."""
    if x.shape[-1] < 1:
        raise NumericsError("softmax_lastdim: last dimension must be non-empty")
    row_max = x.max(dim=-1, keepdim=True).values.detach()
    if bool(torch.isneginf(row_max).any()):
        raise NumericsError("softmax_lastdim: a slice has all logits at -inf")
    e = torch.exp(x - row_max)
    return e / e.sum(dim=-1, keepdim=True)


@dataclass
class GradCheckReport:
    max_rel_error: float
    failing_index: Optional[int]
    n_checked: int
    passed: bool


def grad_check(
    f: Callable[[torch.Tensor], torch.Tensor],
    x: torch.Tensor,
    step: float = 1e-5,
    tol: float = 1e-4,
) -> GradCheckReport:
    """Compare the autograd gradient of scalar ``f`` at ``x`` with central differences.

    Relative error per element is ``|a - n| / max(|a|, |n|, 1e-8)``. ``failing_index``
    is the flat index of the worst element when the check fails.
    """
    if x.dtype != torch.float64:
        raise NumericsError("grad_check requires double precision")
    if not (1e-6 <= step <= 1e-4):
        raise NumericsError(f"grad_check: step {step} outside [1e-6, 1e-4]")

    x0 = x.detach().clone()
    xg = x0.clone().requires_grad_(True)
    value = f(xg)
    if value.numel() != 1:
        raise NumericsError("grad_check: f must return a scalar")
    check_finite(value.detach(), "grad_check forward value")
    (analytic,) = torch.autograd.grad(value, xg, allow_unused=True)
    if analytic is None:
        analytic = torch.zeros_like(x0)
    analytic = analytic.reshape(-1)

    flat = x0.reshape(-1)
    numeric = torch.empty_like(flat)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + step
            fp = f(x0).item()
            flat[i] = orig - step
            fm = f(x0).item()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericsError(f"grad_check: non-finite forward value at index {i}")
            numeric[i] = (fp - fm) / (2.0 * step)

    denom = torch.maximum(torch.maximum(analytic.abs(), numeric.abs()), torch.full_like(numeric, 1e-8))
    rel = (analytic - numeric).abs() / denom
    worst = int(torch.argmax(rel)) if rel.numel() else 0
    max_rel = float(rel.max()) if rel.numel() else 0.0
    passed = max_rel < tol
    return GradCheckReport(max_rel, None if passed else worst, int(flat.numel()), passed)


def save_array(path: str | Path, x: torch.Tensor) -> None:
    """Write ``x`` as one JSON header line followed by little-endian row-major floats."""
    if x.dtype not in _DTYPE_TO_PRECISION:
        raise NumericsError(f"unsupported dtype {x.dtype}")
    precision = _DTYPE_TO_PRECISION[x.dtype]
    arr = x.detach().cpu().contiguous().numpy()
    header = json.dumps({"shape": list(arr.shape), "precision": precision})
    with open(path, "wb") as fh:
        fh.write(header.encode("utf-8") + b"\n")
        fh.write(arr.astype("<f4" if precision == "f32" else "<f8", copy=False).tobytes(order="C"))


def load_array(path: str | Path) -> torch.Tensor:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        payload = fh.read()
    shape = tuple(int(s) for s in header["shape"])
    precision = header["precision"]
    if precision not in _PRECISION_TO_DTYPE:
        raise NumericsError(f"unknown precision {precision!r} in {path}")
    dt = "<f4" if precision == "f32" else "<f8"
    arr = np.frombuffer(payload, dtype=dt)
    if arr.size != int(np.prod(shape, dtype=np.int64)):
        raise NumericsError(f"{path}: payload has {arr.size} values, header shape {list(shape)}")
    native = np.float32 if precision == "f32" else np.float64
    return torch.from_numpy(arr.astype(native, copy=True)).reshape(shape)
