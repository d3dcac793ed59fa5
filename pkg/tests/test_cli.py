import json
import os
import subprocess
import sys

import numpy as np
import pytest

from conftest import build_texture_dataset
from dvit.cli import main, merged_config, UsageError
from dvit.data import read_manifest, write_manifest
from dvit.tensor import dump_tensors, load_tensors


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """An unsplit 4-class manifest plus room for command outputs."""
    root = tmp_path_factory.mktemp("cli")
    (root / "images").mkdir()
    entries = build_texture_dataset(root / "images", classes=4, per_class=5,
                                    size=64, seed=11, split="-")
    manifest = root / "manifest.tsv"
    write_manifest(manifest, entries)
    return root


def run(argv):
    return main([str(a) for a in argv])


def summary_of(out_dir):
    with open(os.path.join(out_dir, "summary.json")) as fh:
        return json.load(fh)


# -- config precedence --------------------------------------------------------

def test_defaults_then_file_then_set(tmp_path):
    cfg_file = tmp_path / "cfg.json"
    cfg_file.write_text(json.dumps({"epochs": 7, "lr": 0.5}))
    cfg = merged_config("train", str(cfg_file), ["lr=0.25", "batch_size=4"])
    assert cfg["epochs"] == 7          # from the file
    assert cfg["lr"] == 0.25           # --set beats the file
    assert cfg["batch_size"] == 4      # --set beats the default
    assert cfg["model"] == "tiny"      # untouched default


def test_unknown_config_keys_are_rejected(tmp_path):
    with pytest.raises(UsageError):
        merged_config("train", None, ["momentum=0.9"])
    cfg_file = tmp_path / "cfg.json"
    cfg_file.write_text(json.dumps({"no_such_key": 1}))
    with pytest.raises(UsageError):
        merged_config("train", str(cfg_file), [])


def test_bad_usage_exits_one(tmp_path, capsys):
    assert run(["split", "--manifest", "missing.tsv", "--out", tmp_path,
                "--set", "bogus=1"]) == 1
    assert "usage error" in capsys.readouterr().err


# -- command pipeline ---------------------------------------------------------

def test_split_command(workspace):
    out = workspace / "split_out"
    code = run(["split", "--manifest", workspace / "manifest.tsv",
                "--out", out, "--ratios", "0.6,0.2,0.2"])
    assert code == 0
    summary = summary_of(out)
    assert summary["status"] == "ok"
    assert summary["counts"] == {"train": 12, "valid": 4, "test": 4}
    entries = read_manifest(out / "split.tsv")
    assert all(e.split in ("train", "valid", "test") for e in entries)


def test_split_is_reproducible(workspace):
    a, b = workspace / "split_a", workspace / "split_b"
    for out in (a, b):
        assert run(["split", "--manifest", workspace / "manifest.tsv",
                    "--out", out, "--seed", 3]) == 0
    assert (a / "split.tsv").read_bytes() == (b / "split.tsv").read_bytes()


def test_augment_command(workspace):
    split_out = workspace / "split_out"
    out = workspace / "augment_out"
    code = run(["augment", "--manifest", split_out / "split.tsv", "--out", out,
                "--set", "diffusion_per_image=1"])
    assert code == 0
    summary = summary_of(out)
    assert summary["generated"] == 24  # 12 train images x (1 sr + 1 diff)
    assert summary["quarantined"] == 0
    merged = read_manifest(out / "merged.tsv")
    assert any(e.provenance == "diffusion" for e in merged)
    assert all(e.provenance == "original" for e in merged if e.split == "test")


def test_train_eval_gradcam_chain(workspace):
    out = workspace / "train_out"
    code = run(["train", "--manifest", workspace / "split_out" / "split.tsv",
                "--out", out, "--set", "epochs=2", "--set", "batch_size=4",
                "--set", "lr=0.001"])
    assert code == 0
    summary = summary_of(out)
    assert summary["epochs_run"] == 2
    assert np.isfinite(summary["final_train_loss"])
    ckpt = out / "checkpoints" / "last.ckpt"
    assert ckpt.exists()

    eval_out = workspace / "eval_out"
    code = run(["eval", "--checkpoint", ckpt, "--manifest",
                workspace / "split_out" / "split.tsv", "--out", eval_out,
                "--split", "valid"])
    assert code == 0
    metrics = json.loads((eval_out / "metrics.json").read_text())
    assert set(metrics["class_names"]) == {f"class{c}" for c in range(4)}
    assert "kappa" in metrics

    cam_out = workspace / "cam_out"
    image = read_manifest(workspace / "split_out" / "split.tsv")[0].path
    code = run(["gradcam", "--checkpoint", ckpt, "--image", image,
                "--target-class", "class1", "--manifest",
                workspace / "split_out" / "split.tsv", "--out", cam_out])
    assert code == 0
    tensors, meta = load_tensors(cam_out / "heatmap.tensors")
    assert tensors["heatmap"].shape == (64, 64)
    assert meta["target_class"] == 1
    assert (cam_out / "overlay.png").read_bytes()[:4] == b"\x89PNG"


def test_gradcam_class_name_needs_manifest(workspace, tmp_path):
    ckpt = workspace / "train_out" / "checkpoints" / "last.ckpt"
    out = tmp_path / "cam"
    image = read_manifest(workspace / "split_out" / "split.tsv")[0].path
    code = run(["gradcam", "--checkpoint", ckpt, "--image", image,
                "--target-class", "class1", "--out", out])
    assert code == 1
    assert summary_of(out)["status"] == "usage-error"


def test_resume_continues_from_checkpoint(workspace):
    out = workspace / "resume_out"
    ckpt = workspace / "train_out" / "checkpoints" / "last.ckpt"
    code = run(["train", "--manifest", workspace / "split_out" / "split.tsv",
                "--out", out, "--resume", ckpt,
                "--set", "epochs=3", "--set", "batch_size=4"])
    assert code == 0
    # prior history is carried over so the log stays contiguous from 1
    records = [json.loads(line)
               for line in (out / "runlog.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in records] == [1, 2, 3]
    prior = [json.loads(line) for line in
             (workspace / "train_out" / "runlog.jsonl").read_text().splitlines()]
    assert records[:2] == prior


def test_kid_command(workspace, tmp_path):
    rng = np.random.default_rng(0)
    real = tmp_path / "real.tensors"
    gen = tmp_path / "gen.tensors"
    dump_tensors(real, {"features": np.full((20, 3), 2.0)})
    dump_tensors(gen, {"features": np.full((20, 3), 2.0)})
    out = tmp_path / "kid_out"
    code = run(["kid", "--real-features", real, "--gen-features", gen,
                "--out", out, "--set", "subsets=5"])
    assert code == 0
    result = json.loads((out / "kid.json").read_text())
    assert result["value"] == 0.0
    assert summary_of(out)["kid"] == 0.0


def test_judge_and_report_commands(tmp_path):
    hm_dir = tmp_path / "heatmaps"
    mask_dir = tmp_path / "masks"
    hm_dir.mkdir()
    mask_dir.mkdir()
    mask = np.zeros((6, 6))
    mask[:3] = 1.0
    for name, overlap in (("river", 0.9), ("field", 0.3)):
        hm = np.zeros((6, 6))
        hm[0, :3] = overlap
        hm[5, :3] = 1.0 - overlap
        dump_tensors(hm_dir / f"{name}.tensors", {"heatmap": hm})
        dump_tensors(mask_dir / f"{name}.tensors", {"mask": mask})
    out = tmp_path / "judge_out"
    code = run(["judge", "--heatmaps", hm_dir, "--masks", mask_dir,
                "--out", out, "--set", "model_name=dvit"])
    assert code == 0
    assert summary_of(out)["judged"] == 2
    table = (out / "aggregate.txt").read_text()
    assert table.splitlines()[0].startswith("model")
    assert "dvit" in table

    report_out = tmp_path / "report_out"
    code = run(["report", "--verdicts", out / "verdicts.jsonl",
                "--out", report_out])
    assert code == 0
    parsed = json.loads((report_out / "aggregate.json").read_text())
    assert parsed[0]["model"] == "dvit"
    assert parsed[0]["mean_score"] == 2.0  # scores 3 and 1 average out


def test_judge_requires_matching_masks(tmp_path):
    hm_dir = tmp_path / "h"
    mask_dir = tmp_path / "m"
    hm_dir.mkdir()
    mask_dir.mkdir()
    dump_tensors(hm_dir / "a.tensors", {"heatmap": np.ones((4, 4))})
    out = tmp_path / "out"
    assert run(["judge", "--heatmaps", hm_dir, "--masks", mask_dir,
                "--out", out]) == 1
    assert summary_of(out)["status"] == "usage-error"


def test_missing_checkpoint_exits_two(workspace, tmp_path):
    out = tmp_path / "bad_eval"
    code = run(["eval", "--checkpoint", tmp_path / "nope.ckpt",
                "--manifest", workspace / "split_out" / "split.tsv",
                "--out", out])
    assert code == 2
    summary = summary_of(out)
    assert summary["status"] == "error"
    assert "error" in summary


def test_summary_is_always_written(tmp_path):
    out = tmp_path / "broken"
    code = run(["split", "--manifest", tmp_path / "missing.tsv", "--out", out])
    assert code == 2
    assert summary_of(out)["status"] == "error"


def test_console_script_help():
    proc = subprocess.run([sys.executable, "-m", "dvit.cli", "--help"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    for command in ("split", "augment", "train", "eval", "gradcam", "kid",
                    "judge", "report"):
        assert command in proc.stdout
