from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from ..synthdata import Sample, derive_seed
from .flow import Conditioning, build_conditioning, rf_loss
from .model import ToyDiT

log = logging.getLogger(__name__)

FULL_SCALE_LEARNING_RATE = 1e-5  # full-scale finetuning rate; toy runs override it


class NonFiniteLoss(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value} at step {step}")
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 500
    batch_size: int = 2
    lr: float = 1e-3
    seed: int = 0
    checkpoint_every: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainState:
    step: int = 0
    losses: list[float] = field(default_factory=list)


def batch_indices(n: int, batch_size: int, step: int, seed: int) -> list[int]:
    """Sample indices for ``step``; a fresh seeded permutation per epoch."""
    out = []
    for j in range(step * batch_size, (step + 1) * batch_size):
        epoch, pos = divmod(j, n)
        perm = np.random.default_rng([seed, epoch]).permutation(n)
        out.append(int(perm[pos]))
    return out


def step_noise(shape: torch.Size, batch: int, step: int, seed: int) -> tuple[torch.Tensor, torch.Tensor]:
    gen = torch.Generator().manual_seed(derive_seed(seed, step))
    t = torch.rand(batch, generator=gen, dtype=torch.float64)
    eps = torch.randn(shape, generator=gen, dtype=torch.float64)
    return eps, t


def moving_average(values: Sequence[float], window: int = 10) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    c = np.cumsum(np.insert(v, 0, 0.0))
    out = np.empty_like(v)
    for i in range(len(v)):
        lo = max(0, i + 1 - window)
        out[i] = (c[i + 1] - c[lo]) / (i + 1 - lo)
    return out


def make_optimizer(model: ToyDiT, lr: float) -> torch.optim.Optimizer:
    return torch.optim.Adam(model.parameters(), lr=lr)


def train(
    model: ToyDiT,
    samples: Sequence[Sample],
    tcfg: TrainConfig,
    optimizer: Optional[torch.optim.Optimizer] = None,
    state: Optional[TrainState] = None,
    on_step: Optional[Callable[[TrainState], None]] = None,
) -> TrainState:
    """Self-supervised reconstruction loop. Resumable: all randomness is keyed by step."""
    optimizer = optimizer or make_optimizer(model, tcfg.lr)
    state = state or TrainState()
    dtype = next(model.parameters()).dtype
    x0_all, cond_all = build_conditioning(samples, model.cfg)
    x0_all, cond_all = x0_all.to(dtype), cond_all.to(dtype)
    n = len(samples)
    model.train()
    while state.step < tcfg.steps:
        idx = batch_indices(n, tcfg.batch_size, state.step, tcfg.seed)
        x0 = x0_all[idx]
        cond = Conditioning(
            cond_all.ref_video_latent[idx],
            cond_all.pooled_mask[idx],
            None if cond_all.ref_latent is None else cond_all.ref_latent[idx],
        )
        eps, t = step_noise(x0.shape, len(idx), state.step, tcfg.seed)
        loss = rf_loss(model, x0, cond, eps.to(dtype), t.to(dtype))
        value = float(loss.detach())
        if not math.isfinite(value):
            raise NonFiniteLoss(state.step, value)
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        state.losses.append(value)
        state.step += 1
        if state.step % 100 == 0:
            log.info("step %d loss %.5f", state.step, value)
        if on_step is not None:
            on_step(state)
    return state
