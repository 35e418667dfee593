"""Checkpoint directory: one RealArray file per tensor plus manifest.json."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

import torch

from ..hcu import layout_manifest
from ..numerics import load_array, save_array
from .model import ModelConfig, ToyDiT
from .train import make_optimizer

FORMAT_VERSION = "1"


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(
    root: str | Path,
    model: ToyDiT,
    optimizer: Optional[torch.optim.Optimizer],
    step: int,
    extra: Optional[dict] = None,
) -> None:
    root = Path(root)
    (root / "params").mkdir(parents=True, exist_ok=True)
    names = []
    for name, p in model.named_parameters():
        save_array(root / "params" / f"{name}.bin", p.detach())
        names.append(name)
    has_opt = optimizer is not None and bool(optimizer.state)
    if has_opt:
        (root / "optim").mkdir(exist_ok=True)
        for name, p in model.named_parameters():
            st = optimizer.state[p]
            save_array(root / "optim" / f"{name}.exp_avg.bin", st["exp_avg"])
            save_array(root / "optim" / f"{name}.exp_avg_sq.bin", st["exp_avg_sq"])
    cfg = model.cfg
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": cfg.to_dict(),
        "channel_layout": layout_manifest(cfg.latent_channels, cfg.latent_channels),
        "rope_mode": {"kind": cfg.rope_kind.value, "n_head": cfg.n_head},
        "seed": cfg.seed,
        "step": step,
        "parameters": names,
        "optimizer": "adam" if has_opt else None,
        "lr": optimizer.param_groups[0]["lr"] if optimizer is not None else None,
    }
    if extra:
        manifest.update(extra)
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_checkpoint(root: str | Path) -> tuple[ToyDiT, Optional[torch.optim.Optimizer], dict]:
    root = Path(root)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise CheckpointError(f"no checkpoint manifest at {mpath}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format {manifest.get('format_version')!r}")
    model = ToyDiT(ModelConfig.from_dict(manifest["config"]))
    params = dict(model.named_parameters())
    if sorted(params) != sorted(manifest["parameters"]):
        raise CheckpointError("checkpoint parameter set does not match the model config")
    arrays = {name: load_array(root / "params" / f"{name}.bin") for name in params}
    model = model.to(next(iter(arrays.values())).dtype)
    params = dict(model.named_parameters())
    with torch.no_grad():
        for name, p in params.items():
            p.copy_(arrays[name])
    optimizer = None
    if manifest.get("optimizer") == "adam":
        optimizer = make_optimizer(model, manifest["lr"])
        for name, p in params.items():
            optimizer.state[p] = {
                "step": torch.tensor(float(manifest["step"])),
                "exp_avg": load_array(root / "optim" / f"{name}.exp_avg.bin"),
                "exp_avg_sq": load_array(root / "optim" / f"{name}.exp_avg_sq.bin"),
            }
    return model, optimizer, manifest
