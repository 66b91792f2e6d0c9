import json
from pathlib import Path

import pytest

from composelab import cli


TINY = {
    "model": {"image_size": 8, "patch_size": 2, "hidden_dim": 16,
              "num_blocks": 2, "num_heads": 2, "text_dim": 8,
              "max_tokens": 4, "timesteps": 20},
    "dataset": {"n": 12, "canvas": 8, "seed": 0},
    "train": {"steps": 6, "batch_size": 2, "lr": 1e-3, "warmup": 2,
              "log_every": 2, "seed": 0},
    "sample": {"num_steps": 5, "guidance_scale": 2.0, "sampler": "ddim",
               "prompts": ["a red-circle and a blue-square"]},
    "finetune": {"steps": 2, "batch_size": 2, "latent_source": "q_sample",
                 "x0_pool": 2, "pairs": [["red-circle", "blue-square"]]},
    "tta": {"refine_steps": 2, "step_size": 0.1},
    "eval": {"protocols": ["single"], "n_prompts": 2, "threshold": 0.7,
             "chunk": 4, "reference_n": 17},
    "seed": 3,
}


def write_config(tmp_path, extra=None, name="config.json"):
    cfg = json.loads(json.dumps(TINY))
    for section, content in (extra or {}).items():
        if isinstance(content, dict):
            cfg.setdefault(section, {}).update(content)
        else:
            cfg[section] = content
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return path


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """gen-data + train-base once; downstream commands reuse the artifacts."""
    root = tmp_path_factory.mktemp("cli")
    cfg = write_config(root)
    assert cli.run(["gen-data", "--config", str(cfg),
                    "--out", str(root / "data")]) == 0
    cfg_train = write_config(root, {"paths": {"dataset": str(root / "data/dataset")}},
                             name="train.json")
    assert cli.run(["train-base", "--config", str(cfg_train),
                    "--out", str(root / "base")]) == 0
    return root


def test_gen_data_outputs(pipeline):
    ds = pipeline / "data" / "dataset"
    assert (ds / "manifest.json").exists()
    assert (ds / "prompts.txt").exists()
    assert len(list(ds.glob("*.png"))) == 12
    assert (pipeline / "data" / "resolved_config.json").exists()


def test_gen_data_idempotent(pipeline, tmp_path):
    cfg = write_config(tmp_path)
    assert cli.run(["gen-data", "--config", str(cfg),
                    "--out", str(tmp_path / "again")]) == 0
    orig = (pipeline / "data" / "dataset" / "scene_00003.png").read_bytes()
    redo = (tmp_path / "again" / "dataset" / "scene_00003.png").read_bytes()
    assert orig == redo


def test_train_base_outputs(pipeline):
    base = pipeline / "base"
    assert (base / "base.ckpt").exists()
    assert (base / "vocab.json").exists()
    assert (base / "train_log.jsonl").exists()
    assert (base / "train_curves.png").exists()


def test_sample_deterministic(pipeline, tmp_path):
    cfg = write_config(tmp_path, {"paths": {"checkpoint": str(pipeline / "base/base.ckpt")}})
    for d in ("s1", "s2"):
        assert cli.run(["sample", "--config", str(cfg), "--seed", "42",
                        "--out", str(tmp_path / d)]) == 0
    a = (tmp_path / "s1" / "images" / "sample_0000.png").read_bytes()
    b = (tmp_path / "s2" / "images" / "sample_0000.png").read_bytes()
    assert a == b
    sidecar = json.loads((tmp_path / "s1" / "images" / "sample_0000.json").read_text())
    assert sidecar["prompt"] == "a red-circle and a blue-square"


def test_tta_sample_runs(pipeline, tmp_path):
    cfg = write_config(tmp_path, {"paths": {"checkpoint": str(pipeline / "base/base.ckpt")}})
    assert cli.run(["tta-sample", "--config", str(cfg),
                    "--out", str(tmp_path / "tta")]) == 0
    sidecar = json.loads((tmp_path / "tta" / "images" / "sample_0000.json").read_text())
    assert sidecar["tta"]["refine_steps"] == 2


def test_finetune_outputs(pipeline, tmp_path):
    cfg = write_config(tmp_path, {"paths": {"checkpoint": str(pipeline / "base/base.ckpt")}})
    assert cli.run(["finetune", "--config", str(cfg),
                    "--out", str(tmp_path / "ft")]) == 0
    assert (tmp_path / "ft" / "tuned.ckpt").exists()
    log = [json.loads(line) for line in
           (tmp_path / "ft" / "finetune_log.jsonl").read_text().splitlines()]
    assert len(log) == 2
    assert {"step", "loss_sep", "loss_en", "loss_total"} <= set(log[0])


def test_eval_reports(pipeline, tmp_path):
    cfg = write_config(tmp_path, {"paths": {"checkpoint": str(pipeline / "base/base.ckpt")}})
    assert cli.run(["eval", "--config", str(cfg),
                    "--out", str(tmp_path / "ev")]) == 0
    report = json.loads((tmp_path / "ev" / "report.json").read_text())
    assert report[0]["protocol"] == "single"
    assert (tmp_path / "ev" / "report.csv").exists()
    assert (tmp_path / "ev" / "report.png").exists()


def test_eval_empty_image_dir_fails(pipeline, tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    cfg = write_config(tmp_path, {"paths": {"images": str(tmp_path / "empty")}})
    assert cli.run(["eval", "--config", str(cfg),
                    "--out", str(tmp_path / "ev")]) == 1
    err = capsys.readouterr().err.strip()
    record = json.loads(err.splitlines()[-1])
    assert record["error"]["kind"] == "user"
    assert "no inputs" in record["error"]["message"]


def test_eval_image_dir_roundtrip(pipeline, tmp_path):
    cfg = write_config(tmp_path, {"paths": {"checkpoint": str(pipeline / "base/base.ckpt")}})
    assert cli.run(["sample", "--config", str(cfg),
                    "--out", str(tmp_path / "s")]) == 0
    cfg2 = write_config(tmp_path, {"paths": {"images": str(tmp_path / "s/images")}},
                        name="imgdir.json")
    assert cli.run(["eval", "--config", str(cfg2),
                    "--out", str(tmp_path / "ev2")]) == 0
    report = json.loads((tmp_path / "ev2" / "report.json").read_text())
    assert report[0]["protocol"] == "image-dir"
    assert report[0]["n_prompts"] == 1


def test_attn_dump(pipeline, tmp_path):
    cfg = write_config(tmp_path, {"paths": {"checkpoint": str(pipeline / "base/base.ckpt")}})
    assert cli.run(["attn-dump", "--config", str(cfg),
                    "--out", str(tmp_path / "attn")]) == 0
    d = tmp_path / "attn" / "prompt_000"
    assert (d / "masks_red-circle.pgm").exists()
    assert (d / "masks_blue-square.pgm").exists()
    assert (d / "masks_raw.json").exists()
    assert (d / "masks_panel.png").exists()


def test_ablate_emits_variant_rows(pipeline, tmp_path):
    cfg = write_config(tmp_path, {
        "paths": {"checkpoint": str(pipeline / "base/base.ckpt")},
        "finetune": {"steps": 1},
        "eval": {"n_prompts": 1, "protocols": []},
    })
    assert cli.run(["ablate", "--config", str(cfg),
                    "--out", str(tmp_path / "ab")]) == 0
    rows = json.loads((tmp_path / "ab" / "ablation.json").read_text())
    variants = [r["variant"] for r in rows]
    assert variants[0] == "base"
    assert {"loss:sep-only", "loss:en-only", "loss:both"} <= set(variants)
    assert {"selector:to_q", "selector:to_q|to_k", "selector:to_k|to_v",
            "selector:to_k"} <= set(variants)
    assert (tmp_path / "ab" / "ablation.csv").exists()
    assert (tmp_path / "ab" / "ablation.png").exists()


def test_bad_config_is_user_error(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"modle": {}}))
    assert cli.run(["eval", "--config", str(path),
                    "--out", str(tmp_path / "x")]) == 1
    record = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert record["error"]["kind"] == "user"


def test_missing_checkpoint_is_user_error(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert cli.run(["sample", "--config", str(cfg),
                    "--out", str(tmp_path / "x")]) == 1
