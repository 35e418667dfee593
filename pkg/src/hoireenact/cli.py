"""Command-line entry point: gen-data, train, eval, ablate, attn-decay, grad-check.

Every run resolves one JSON config (defaults merged with ``--config``), writes it as
``config.json`` beside its outputs and embeds its hash in every CSV.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import shutil
import sys
from pathlib import Path
from typing import Optional, Sequence

import torch

from . import __version__
from .experiments import (
    ARM_LABELS,
    ARMS,
    attention_mass_curves,
    cross_samples,
    evaluate,
    model_config_for_scene,
    run_ablation,
    summarize_ablation,
)
from .gradchecks import GRAD_CHECKS, run_grad_checks
from .metrics import MetricReport, export_decay_csv, write_reports_csv
from .numerics import NumericsError
from .rope import RopeKind, RopeMode, build_freqs, measure_ref_response
from .synthdata import TOY_SCENE, SceneError, SceneSpec, gen_dataset, read_dataset, write_dataset
from .toy_dit.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .toy_dit.model import ModelConfig, ToyDiT, param_report
from .toy_dit.train import NonFiniteLoss, TrainConfig, TrainState, make_optimizer, moving_average, train

log = logging.getLogger("hoireenact")

SCHEMA = "1"
EXIT_OK, EXIT_CONFIG, EXIT_COLLISION, EXIT_MISSING, EXIT_NUMERIC, EXIT_VERIFY = 0, 2, 3, 4, 5, 6


class CliError(Exception):
    code = 1


class ConfigError(CliError):
    code = EXIT_CONFIG


class OutputCollision(CliError):
    code = EXIT_COLLISION


class MissingInput(CliError):
    code = EXIT_MISSING


class NumericFailure(CliError):
    code = EXIT_NUMERIC


class VerificationFailure(CliError):
    code = EXIT_VERIFY


def default_config() -> dict:
    return {
        "schema": SCHEMA,
        "scene": TOY_SCENE.to_dict(),
        "model": {k: v for k, v in ModelConfig().to_dict().items() if k not in ("latent_extents", "ref_extents")},
        "gen_data": {"n": 64, "master_seed": 1},
        "train": {**TrainConfig().to_dict(), "dataset": None, "resume": None},
        "eval": {"checkpoint": None, "dataset": None, "n_steps": 20, "seed": 0, "donor_master_seed": 4242},
        "ablate": {
            "train_dataset": None,
            "test_dataset": None,
            "arms": list(ARMS),
            "seeds": [0, 1, 2],
            "n_steps": 20,
            "train": TrainConfig().to_dict(),
        },
        "attn_decay": {
            "modes": [RopeKind.SEPARATE_REF.value, RopeKind.HEAD_SLIDING.value],
            "extents": [8, 4, 4],
            "head_dim": 128,
            "n_head": 8,
            "trials": 10_000,
            "seeds": [0, 1, 2, 3, 4],
            "checkpoints": [],
            "dataset": None,
        },
        "grad_check": {"names": list(GRAD_CHECKS), "seed": 0},
    }


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        where = f"{path}{k}"
        if k not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[k], dict) and k != "scene":
            if not isinstance(v, dict):
                raise ConfigError(f"config key {where!r} must be an object")
            out[k] = _merge(base[k], v, where + ".")
        else:
            out[k] = v
    return out


def resolve_config(path: Optional[str]) -> dict:
    cfg = default_config()
    if path is None:
        return cfg
    p = Path(path)
    if not p.exists():
        raise MissingInput(f"config file {p} not found")
    try:
        user = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{p}: invalid JSON ({e})") from None
    if not isinstance(user, dict):
        raise ConfigError(f"{p}: top level must be an object")
    if user.get("schema", SCHEMA) != SCHEMA:
        raise ConfigError(f"{p}: unsupported schema {user.get('schema')!r}, expected {SCHEMA!r}")
    merged = _merge(cfg, user)
    if "scene" in user:
        merged["scene"] = {**cfg["scene"], **user["scene"]}
    return merged


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:12]


def _scene(cfg: dict) -> SceneSpec:
    try:
        spec = SceneSpec.from_dict(cfg["scene"])
        spec.validate()
    except (TypeError, SceneError) as e:
        raise ConfigError(f"scene: {e}") from None
    return spec


def _model_config(cfg: dict, scene: SceneSpec) -> ModelConfig:
    try:
        mc = model_config_for_scene(scene, ModelConfig.from_dict(cfg["model"]))
        build_freqs(mc.head_dim, mc.rope_base)
    except (TypeError, ValueError, NumericsError) as e:
        raise ConfigError(f"model: {e}") from None
    return mc


def _train_config(section: dict) -> TrainConfig:
    keys = TrainConfig.__dataclass_fields__
    try:
        tc = TrainConfig(**{k: v for k, v in section.items() if k in keys})
    except TypeError as e:
        raise ConfigError(f"train: {e}") from None
    if tc.steps < 1 or tc.batch_size < 1 or tc.lr <= 0 or tc.checkpoint_every < 0:
        raise ConfigError("train: steps and batch_size must be >= 1, lr > 0, checkpoint_every >= 0")
    return tc


def _dataset(path: Optional[str], what: str):
    if not path:
        raise MissingInput(f"{what}: no dataset path configured")
    p = Path(path)
    if not (p / "manifest.json").exists():
        raise MissingInput(f"{what}: no dataset at {p}")
    return read_dataset(p)


def _checkpoint(path: Optional[str], what: str):
    if not path:
        raise MissingInput(f"{what}: no checkpoint path configured")
    try:
        return load_checkpoint(path)
    except CheckpointError as e:
        raise MissingInput(f"{what}: {e}") from None


def prepare_out(out: Path, force: bool) -> Path:
    if out.exists() and any(out.iterdir()):
        if not force:
            raise OutputCollision(f"output directory {out} is not empty (use --force to overwrite)")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_config(out: Path, cfg: dict, command: str) -> str:
    h = config_hash(cfg)
    doc = {**cfg, "command": command, "config_hash": h, "version": __version__}
    (out / "config.json").write_text(json.dumps(doc, indent=2, sort_keys=True))
    return h


def cmd_gen_data(cfg: dict, out: Path) -> int:
    scene = _scene(cfg)
    sec = cfg["gen_data"]
    if not isinstance(sec["n"], int) or sec["n"] < 1:
        raise ConfigError("gen_data.n must be a positive integer")
    samples = gen_dataset(sec["n"], scene, sec["master_seed"])
    write_dataset(out, samples, sec["master_seed"])
    print(f"wrote {len(samples)} samples to {out}")
    return EXIT_OK


def _write_loss_csv(path: Path, h: str, losses: Sequence[float], first_step: int) -> None:
    ma = moving_average(losses, 10)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["config_hash", "step", "loss", "loss_ma10"])
        for i, (l, m) in enumerate(zip(losses, ma)):
            w.writerow([h, first_step + i + 1, repr(float(l)), repr(float(m))])


def _write_param_report(path: Path, h: str, model: ToyDiT) -> None:
    rep = param_report(model)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["config_hash", "component", "parameters"])
        for k, v in rep.components.items():
            w.writerow([h, k, v])
        for i, g in enumerate(rep.gate_per_block):
            w.writerow([h, f"gate_block_{i}", g])
        w.writerow([h, "total", rep.total])
        w.writerow([h, "overhead", rep.overhead])
        w.writerow([h, "overhead_fraction", repr(rep.overhead_fraction)])


def cmd_train(cfg: dict, out: Path, h: str) -> int:
    scene = _scene(cfg)
    tcfg = _train_config(cfg["train"])
    _model_config(cfg, scene)  # fail on a bad model section before touching inputs
    samples = _dataset(cfg["train"]["dataset"], "train")
    if samples[0].spec != scene:
        log.warning("dataset scene differs from the configured scene; using the dataset's")
        scene = samples[0].spec
    resume = cfg["train"].get("resume")
    if resume:
        model, optimizer, manifest = _checkpoint(resume, "train.resume")
        state = TrainState(step=int(manifest["step"]))
        if optimizer is None:
            optimizer = make_optimizer(model, tcfg.lr)
    else:
        model = ToyDiT(_model_config(cfg, scene))
        optimizer, state = make_optimizer(model, tcfg.lr), TrainState()
    first_step = state.step

    def on_step(st: TrainState) -> None:
        if tcfg.checkpoint_every and st.step % tcfg.checkpoint_every == 0:
            save_checkpoint(out / "checkpoints" / f"step_{st.step}", model, optimizer, st.step, {"config_hash": h})

    try:
        state = train(model, samples, tcfg, optimizer, state, on_step)
    except NonFiniteLoss as e:
        _write_loss_csv(out / f"loss_{h}.csv", h, state.losses, first_step)
        raise NumericFailure(f"training diverged: {e} (step index {e.step})") from None
    save_checkpoint(out / "checkpoint", model, optimizer, state.step, {"config_hash": h})
    _write_loss_csv(out / f"loss_{h}.csv", h, state.losses, first_step)
    _write_param_report(out / f"params_{h}.csv", h, model)
    ma = moving_average(state.losses, 10)
    print(f"trained steps {first_step + 1}..{state.step}: loss_ma10 {ma[0]:.4f} -> {ma[-1]:.4f}")
    return EXIT_OK


def cmd_eval(cfg: dict, out: Path, h: str) -> int:
    sec = cfg["eval"]
    model, _, _ = _checkpoint(sec["checkpoint"], "eval")
    samples = _dataset(sec["dataset"], "eval")
    splits = {
        "self": samples,
        "cross": cross_samples(samples, sec["donor_master_seed"]),
    }
    reports: dict[str, list] = {"psnr": [], "ssim": [], "oc": []}
    for split, data in splits.items():
        scores = evaluate(model, data, sec["n_steps"], sec["seed"])
        for metric in reports:
            rep = MetricReport(metric, h, sec["seed"], [(s.name, getattr(s, metric)) for s in scores])
            reports[metric].append(({"split": split}, rep))
            print(f"{split:5s} {metric:4s} {rep.aggregate:.4f}")
    for metric, reps in reports.items():
        write_reports_csv(out, reps)
    return EXIT_OK


def cmd_ablate(cfg: dict, out: Path, h: str) -> int:
    sec = cfg["ablate"]
    unknown = [a for a in sec["arms"] if a not in ARMS]
    if unknown:
        raise ConfigError(f"ablate.arms: unknown arms {unknown}")
    tcfg = _train_config(sec["train"])
    train_s = _dataset(sec["train_dataset"], "ablate")
    test_s = _dataset(sec["test_dataset"], "ablate")
    base = _model_config(cfg, train_s[0].spec)
    runs_path = out / f"ablation_runs_{h}.csv"
    with open(runs_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["config_hash", "arm", "seed", "psnr", "ssim", "oc", "final_loss"])

        def on_row(r):
            w.writerow([h, r.arm, r.seed, repr(r.psnr), repr(r.ssim), repr(r.oc), repr(r.final_loss)])
            fh.flush()
            print(f"{r.arm:22s} seed {r.seed}: psnr {r.psnr:.3f} ssim {r.ssim:.4f} oc {r.oc:.4f} ({r.seconds:.0f}s)")

        rows = run_ablation(sec["arms"], sec["seeds"], train_s, test_s, base, tcfg, sec["n_steps"], on_row)
    summary = summarize_ablation(rows)
    with open(out / f"ablation_{h}.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["config_hash", "arm", "method", "n_seeds", "psnr", "ssim", "oc"])
        for arm, m in summary.items():
            w.writerow([h, arm, ARM_LABELS[arm], len(sec["seeds"]), repr(m["psnr"]), repr(m["ssim"]), repr(m["oc"])])
    return EXIT_OK


def cmd_attn_decay(cfg: dict, out: Path, h: str) -> int:
    sec = cfg["attn_decay"]
    try:
        modes = [RopeKind(m) for m in sec["modes"]]
        freqs = build_freqs(sec["head_dim"])
    except (ValueError, NumericsError) as e:
        raise ConfigError(f"attn_decay: {e}") from None
    extents = tuple(sec["extents"])
    rope_curves = []
    for seed in sec["seeds"]:
        for kind in modes:
            c = measure_ref_response(RopeMode(kind, sec["n_head"]), extents, freqs, sec["trials"], seed)
            rope_curves.append(c)
            print(f"rope_mc seed {seed} {kind.value:13s} cv {c.cv:.5f}")
    mass_curves = []
    if sec["checkpoints"]:
        samples = _dataset(sec["dataset"], "attn_decay")
        for ckpt in sec["checkpoints"]:
            model, _, _ = _checkpoint(ckpt, "attn_decay")
            hoi, bg = attention_mass_curves(model, samples)
            mass_curves += [hoi, bg]
            print(f"model {model.cfg.rope_kind.value:13s} hoi cv {hoi.cv:.5f} bg mass {bg.mean_mass.max():.3g}")
    path = export_decay_csv(out / f"decay_{h}.csv", rope_curves, mass_curves, h)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_grad_check(cfg: dict, out: Path, h: str) -> int:
    sec = cfg["grad_check"]
    try:
        reports = run_grad_checks(sec["names"], sec["seed"])
    except KeyError as e:
        raise ConfigError(str(e)) from None
    with open(out / f"grad_check_{h}.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["config_hash", "composite", "max_rel_error", "n_checked", "passed"])
        for name, r in reports.items():
            w.writerow([h, name, repr(r.max_rel_error), r.n_checked, r.passed])
            print(f"{name:18s} max rel err {r.max_rel_error:.3e} over {r.n_checked} {'PASS' if r.passed else 'FAIL'}")
    failed = [n for n, r in reports.items() if not r.passed]
    if failed:
        raise VerificationFailure(f"gradient check failed for: {', '.join(failed)}")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "attn-decay": cmd_attn_decay,
    "grad-check": cmd_grad_check,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # usage errors are config errors
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config (schema 1); omitted keys take defaults")
    common.add_argument("--out", help="output directory (default: runs/<command>)")
    common.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    common.add_argument("--threads", type=int, default=1, help="torch intra-op threads (default 1)")
    common.add_argument("-v", "--verbose", action="store_true")
    p = _Parser(prog="hoireenact", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        torch.set_num_threads(args.threads)
        cfg = resolve_config(args.config)
        out = prepare_out(Path(args.out or f"runs/{args.command}"), args.force)
        h = _write_config(out, cfg, args.command)
        fn = COMMANDS[args.command]
        return fn(cfg, out) if fn is cmd_gen_data else fn(cfg, out, h)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code


if __name__ == "__main__":
    sys.exit(main())
