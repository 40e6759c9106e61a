import json

import numpy as np
import pytest
from PIL import Image

from afa.checkpoint import load_arrays, save_checkpoint
from afa.cli import run_command
from afa.diffusion import PerfectEpsOracle, make_schedule

SPEC = {"n_down": 2, "n_up": 2, "base_channels": 8, "channel_mults": [1, 2], "cond_dim": 8,
        "img_size": 8, "n_tokens": 2}


def _config(tmp_path, **extra):
    cfg = {"spec": SPEC, "schedule": {"T": 100},
           "data": {"n_train": 8, "n_val": 4, "expert_shapes": [["circle"], ["square"]]},
           "pretrain": {"epochs": 1, "batch_size": 4, "lr": 1e-3},
           "train": {"epochs": 1, "batch_size": 4},
           "sampling": {"steps": 5, "n": 1},
           "analysis": {"t": 50, "M": 4, "region_size": 4, "n_timesteps_sampled": 1}}
    for k, v in extra.items():
        cfg.setdefault(k, {}).update(v) if isinstance(v, dict) else cfg.__setitem__(k, v)
    path = tmp_path / f"cfg_{len(list(tmp_path.glob('cfg_*')))}.json"
    path.write_text(json.dumps(cfg))
    return str(path)


@pytest.fixture(scope="module")
def experts(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("experts")
    assert run_command(["pretrain-experts", "--config", _config(tmp), "--out", str(tmp)]) == 0
    return tmp


def test_gen_data(tmp_path):
    assert run_command(["gen-data", "--config", _config(tmp_path), "--out", str(tmp_path)]) == 0
    manifest, arrays = load_arrays(tmp_path / "train")
    assert arrays["images"].shape == (16, 3, 8, 8) and manifest["split"] == "train"
    lines = (tmp_path / "val_scenes.jsonl").read_text().splitlines()
    assert len(lines) == 8 and {json.loads(l)["shape"] for l in lines} == {"circle", "square"}


def test_pretrain_writes_log_and_checkpoints(experts):
    assert (experts / "expert_0" / "manifest.json").exists()
    assert (experts / "expert_1" / "manifest.json").exists()
    records = [json.loads(l) for l in (experts / "train_log.jsonl").read_text().splitlines()]
    assert {r["expert"] for r in records} == {"ancestor", 0, 1}
    assert all("loss" in r for r in records)
    assert (experts / "ancestor" / "manifest.json").exists()


def test_train_eval_sample_merge(experts, tmp_path):
    paths = {"experts": [str(experts / "expert_0"), str(experts / "expert_1")]}
    assert run_command(["train-afa", "--config", _config(tmp_path, paths=paths),
                        "--out", str(tmp_path / "afa")]) == 0
    assert run_command(["train-moe", "--config", _config(tmp_path, paths=paths),
                        "--out", str(tmp_path / "moe")]) == 0
    assert run_command(["merge", "--config", _config(tmp_path, paths=paths),
                        "--out", str(tmp_path / "mg")]) == 0
    model = {**paths, "model": str(tmp_path / "afa" / "afa")}
    cfg = _config(tmp_path, paths=model)
    assert run_command(["eval", "--config", cfg, "--out", str(tmp_path / "ev")]) == 0
    rec = json.loads((tmp_path / "ev" / "metrics.jsonl").read_text())
    assert rec["mse"] > 0 and rec["n"] == 8
    assert run_command(["export-attn", "--config", cfg, "--out", str(tmp_path / "attn")]) == 0
    assert len(list((tmp_path / "attn" / "png").glob("*.png"))) == 5 * 2
    assert run_command(["analyze-wins", "--config", cfg, "--out", str(tmp_path / "w")]) == 0
    _, arrays = load_arrays(tmp_path / "w" / "winmap")
    np.testing.assert_allclose(arrays["wins"].sum(-1), 1.0)
    for run in ("s1", "s2"):
        assert run_command(["sample", "--config", cfg, "--seed", "4",
                            "--out", str(tmp_path / run)]) == 0
    a = sorted((tmp_path / "s1").glob("*.png"))
    assert len(a) == 2
    for p in a:
        assert p.read_bytes() == (tmp_path / "s2" / p.name).read_bytes()
        assert Image.open(p).size == (8, 8)


def test_single_model_afa(experts, tmp_path):
    cfg = _config(tmp_path, paths={"experts": [str(experts / "expert_0")]})
    assert run_command(["train-afa", "--config", cfg, "--out", str(tmp_path)]) == 0


def test_eval_oracle_stub_is_zero(tmp_path, capsys):
    save_checkpoint(PerfectEpsOracle(make_schedule(100)), tmp_path / "oracle")
    cfg = _config(tmp_path, paths={"model": str(tmp_path / "oracle")})
    assert run_command(["eval", "--config", cfg, "--out", str(tmp_path)]) == 0
    assert json.loads(capsys.readouterr().out)["mse"] < 1e-10


def test_bad_config_exit_codes(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"spec": SPEC, "bogus": 1}))
    assert run_command(["eval", "--config", str(bad), "--out", str(tmp_path)]) == 2
    bad.write_text("{not json")
    assert run_command(["eval", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert run_command(["eval", "--config", _config(tmp_path), "--out", str(tmp_path)]) == 2
    assert run_command(["no-such-command"]) == 2
    missing = _config(tmp_path, paths={"model": str(tmp_path / "nope")})
    assert run_command(["eval", "--config", missing, "--out", str(tmp_path)]) == 1
