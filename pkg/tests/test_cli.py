import csv
import json
import subprocess
import sys
from pathlib import Path

import pytest

from hoireenact.cli import config_hash, default_config, main

SMALL_SCENE = {"canvas": [12, 12], "frames": 4, "object_size": [4, 4], "hand_radius": 1, "amplitude": 1.0}
SMALL_MODEL = {"n_blocks": 1, "n_head": 2, "head_dim": 6, "mlp_ratio": 2}


def _cfg(tmp_path: Path, name: str, doc: dict) -> str:
    p = tmp_path / f"{name}.json"
    p.write_text(json.dumps({"schema": "1", **doc}))
    return str(p)


def _run(*argv) -> int:
    return main([str(a) for a in argv])


def _tree(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def _rows(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = _cfg(root, "gen", {"scene": SMALL_SCENE, "gen_data": {"n": 4, "master_seed": 7}})
    assert _run("gen-data", "--config", cfg, "--out", root / "data") == 0
    return root, root / "data"


def test_gen_data_layout(dataset):
    _, data = dataset
    manifest = json.loads((data / "manifest.json").read_text())
    assert manifest["n"] == 4 and len(manifest["seeds"]) == 4
    assert sum(1 for p in data.iterdir() if p.is_dir()) == 4
    cfg = json.loads((data / "config.json").read_text())
    assert cfg["command"] == "gen-data" and len(cfg["config_hash"]) == 12
    # resolved config carries defaults for untouched sections
    assert cfg["train"]["steps"] == default_config()["train"]["steps"]


def test_gen_data_collision_and_force(dataset, tmp_path):
    root, data = dataset
    cfg = str(root / "gen.json")
    before = _tree(data)
    assert _run("gen-data", "--config", cfg, "--out", data) == 3
    assert _tree(data) == before
    out = tmp_path / "again"
    assert _run("gen-data", "--config", cfg, "--out", out) == 0
    assert _run("gen-data", "--config", cfg, "--out", out, "--force") == 0
    assert _tree(out) == before


def test_usage_and_config_errors(tmp_path, capsys):
    with pytest.raises(SystemExit) as e:
        main(["frobnicate"])
    assert e.value.code == 2
    assert "usage" in capsys.readouterr().err
    bad = _cfg(tmp_path, "bad", {"gen_data": {"n": 0}})
    assert _run("gen-data", "--config", bad, "--out", tmp_path / "o1") == 2
    unknown = _cfg(tmp_path, "unk", {"trian": {}})
    assert _run("gen-data", "--config", unknown, "--out", tmp_path / "o2") == 2
    schema = _cfg(tmp_path, "schema", {"schema": "9"})
    assert _run("gen-data", "--config", schema, "--out", tmp_path / "o3") == 2
    (tmp_path / "broken.json").write_text("{")
    assert _run("gen-data", "--config", tmp_path / "broken.json", "--out", tmp_path / "o4") == 2
    assert _run("gen-data", "--threads", "0", "--out", tmp_path / "o5") == 2
    odd = _cfg(tmp_path, "odd", {"model": {"head_dim": 5}, "train": {"dataset": str(tmp_path)}})
    assert _run("train", "--config", odd, "--out", tmp_path / "o6") == 2


def test_missing_inputs(tmp_path):
    cfg = _cfg(tmp_path, "t", {"train": {"dataset": str(tmp_path / "nowhere")}})
    assert _run("train", "--config", cfg, "--out", tmp_path / "t") == 4
    cfg = _cfg(tmp_path, "e", {"eval": {"checkpoint": str(tmp_path / "nowhere")}})
    assert _run("eval", "--config", cfg, "--out", tmp_path / "e") == 4
    assert _run("train", "--config", tmp_path / "absent.json", "--out", tmp_path / "a") == 4


def test_config_hash_is_stable():
    a, b = default_config(), default_config()
    assert config_hash(a) == config_hash(b)
    b["train"]["lr"] = 0.5
    assert config_hash(a) != config_hash(b)


@pytest.fixture(scope="module")
def trained(dataset):
    root, data = dataset
    doc = {
        "scene": SMALL_SCENE,
        "model": SMALL_MODEL,
        "train": {"dataset": str(data), "steps": 6, "checkpoint_every": 3},
        "eval": {"dataset": str(data), "n_steps": 2},
    }
    cfg = _cfg(root, "train", doc)
    assert _run("train", "--config", cfg, "--out", root / "train") == 0
    return root, cfg, root / "train"


def test_train_outputs(trained):
    _, cfg, out = trained
    h = json.loads((out / "config.json").read_text())["config_hash"]
    rows = _rows(out / f"loss_{h}.csv")
    assert [int(r["step"]) for r in rows] == list(range(1, 7))
    assert {r["config_hash"] for r in rows} == {h}
    assert (out / "checkpoint" / "manifest.json").exists()
    assert (out / "checkpoints" / "step_3" / "manifest.json").exists()
    params = {r["component"]: r["parameters"] for r in _rows(out / f"params_{h}.csv")}
    assert int(params["gate"]) == 3 * 12 + 1


def test_train_resume_matches(trained, tmp_path):
    root, cfg, out = trained
    doc = json.loads(Path(cfg).read_text())
    doc["train"]["resume"] = str(out / "checkpoints" / "step_3")
    resumed = tmp_path / "resumed"
    assert _run("train", "--config", _cfg(tmp_path, "r", doc), "--out", resumed) == 0
    h0 = json.loads((out / "config.json").read_text())["config_hash"]
    h1 = json.loads((resumed / "config.json").read_text())["config_hash"]
    full = [r["loss"] for r in _rows(out / f"loss_{h0}.csv")]
    tail = _rows(resumed / f"loss_{h1}.csv")
    assert [int(r["step"]) for r in tail] == [4, 5, 6]
    assert [r["loss"] for r in tail] == full[3:]


def test_train_without_gate(dataset, tmp_path):
    _, data = dataset
    doc = {"scene": SMALL_SCENE, "model": {**SMALL_MODEL, "gate_enabled": False}, "train": {"dataset": str(data), "steps": 2}}
    out = tmp_path / "nogate"
    assert _run("train", "--config", _cfg(tmp_path, "ng", doc), "--out", out) == 0
    names = json.loads((out / "checkpoint" / "manifest.json").read_text())["parameters"]
    assert not any(".gate." in n for n in names)


def test_eval_splits_and_rerun(trained, tmp_path):
    root, cfg, out = trained
    doc = json.loads(Path(cfg).read_text())
    doc["eval"]["checkpoint"] = str(out / "checkpoint")
    ecfg = _cfg(tmp_path, "ev", doc)
    a, b = tmp_path / "ea", tmp_path / "eb"
    assert _run("eval", "--config", ecfg, "--out", a) == 0
    assert _run("eval", "--config", ecfg, "--out", b) == 0
    h = json.loads((a / "config.json").read_text())["config_hash"]
    for metric in ("psnr", "ssim", "oc"):
        rows = _rows(a / f"{metric}_{h}.csv")
        splits = {r["split"] for r in rows}
        assert splits == {"self", "cross"}
        assert len([r for r in rows if r["sample"] != "mean"]) >= 8
        assert (a / f"{metric}_{h}.csv").read_bytes() == (b / f"{metric}_{h}.csv").read_bytes()


def test_grad_check_command(tmp_path, capsys):
    cfg = _cfg(tmp_path, "gc", {"grad_check": {"names": ["rotary", "soft_gate"]}})
    assert _run("grad-check", "--config", cfg, "--out", tmp_path / "gc") == 0
    assert "max rel err" in capsys.readouterr().out
    cfg = _cfg(tmp_path, "gc2", {"grad_check": {"names": ["nope"]}})
    assert _run("grad-check", "--config", cfg, "--out", tmp_path / "gc2") == 2


def test_grad_check_failure_exit(tmp_path, monkeypatch, capsys):
    from hoireenact import gradchecks
    from hoireenact.numerics import GradCheckReport

    def broken(seed):
        return GradCheckReport(max_rel_error=1.0, failing_index=0, n_checked=1, passed=False)

    monkeypatch.setitem(gradchecks.GRAD_CHECKS, "rotary", broken)
    cfg = _cfg(tmp_path, "gc", {"grad_check": {"names": ["rotary"]}})
    assert _run("grad-check", "--config", cfg, "--out", tmp_path / "gc") == 6
    assert "rotary" in capsys.readouterr().err


def test_attn_decay_command(tmp_path):
    cfg = _cfg(tmp_path, "ad", {"attn_decay": {"trials": 2000, "seeds": [0], "head_dim": 64}})
    out = tmp_path / "ad"
    assert _run("attn-decay", "--config", cfg, "--out", out) == 0
    h = json.loads((out / "config.json").read_text())["config_hash"]
    rows = _rows(out / f"decay_{h}.csv")
    cv = {r["mode"]: float(r["cv"]) for r in rows}
    assert cv["head_sliding"] < cv["separate_ref"]


def test_ablate_command(dataset, tmp_path):
    _, data = dataset
    doc = {
        "scene": SMALL_SCENE,
        "model": SMALL_MODEL,
        "ablate": {
            "train_dataset": str(data),
            "test_dataset": str(data),
            "arms": ["hcu", "hcu_ref_in_bbox"],
            "seeds": [0],
            "n_steps": 1,
            "train": {"steps": 2},
        },
    }
    out = tmp_path / "ab"
    assert _run("ablate", "--config", _cfg(tmp_path, "ab", doc), "--out", out) == 0
    h = json.loads((out / "config.json").read_text())["config_hash"]
    rows = _rows(out / f"ablation_{h}.csv")
    assert [r["arm"] for r in rows] == ["hcu", "hcu_ref_in_bbox"]
    assert set(rows[0]) >= {"method", "psnr", "ssim", "oc"}
    doc["ablate"]["arms"] = ["bogus"]
    assert _run("ablate", "--config", _cfg(tmp_path, "ab2", doc), "--out", tmp_path / "ab2") == 2


def test_console_script_module_entry(tmp_path):
    r = subprocess.run([sys.executable, "-m", "hoireenact.cli", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.strip()
