import json
from pathlib import Path

import numpy as np
import pytest

from freespace import cli, persist

MODEL = {"feature_dim": 8, "pos_dim": 8, "blocks": 2, "heads": 2,
         "encoder_channels": [8, 8, 8], "n_points": 50,
         "mlp_hidden": 16, "head_hidden": 8,
         "image_height": 128, "image_width": 256}


def write_config(path: Path, **sections) -> Path:
    path.write_text(json.dumps(sections))
    return path


def tree_bytes(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def synth_run(work):
    """One tiny synth run shared by the downstream verbs."""
    cfg = write_config(work / "synth.json", synth={
        "episodes": [{"topology": "straight", "count": 2, "obstacle_count": 1}],
        "frames": 25, "dataset": {"frame_stride": 6}})
    out = work / "run"
    assert cli.main(["synth", "--config", str(cfg), "--seed", "7",
                     "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def trained(work, synth_run):
    cfg = write_config(work / "train.json", model=MODEL, train={
        "data": str(synth_run), "learning_rate": 1e-3, "batch_size": 4,
        "steps": 8, "checkpoint_every": 4})
    out = work / "trained"
    assert cli.main(["train", "--config", str(cfg), "--seed", "3",
                     "--out", str(out)]) == 0
    return out


def test_synth_manifest_counts(synth_run):
    manifest = json.loads((synth_run / "manifest.json").read_text())
    assert manifest["episode_counts"] == {"straight": 2}
    assert manifest["sample_counts"]["straight"] == manifest["samples"] > 0
    assert len(manifest["log_dirs"]) == 2
    assert manifest["failures"] == 0
    records, _ = persist.read_dataset(synth_run)
    assert len(records) == manifest["samples"]


def test_synth_same_seed_is_byte_identical(work):
    cfg = write_config(work / "synth2.json", synth={
        "episodes": [{"topology": "straight", "count": 1}], "frames": 20})
    for out in ("rep-a", "rep-b"):
        assert cli.main(["synth", "--config", str(cfg), "--seed", "11",
                         "--out", str(work / out)]) == 0
    assert tree_bytes(work / "rep-a") == tree_bytes(work / "rep-b")


def test_synth_zero_episodes_succeeds(work):
    cfg = write_config(work / "empty.json", synth={"episodes": []})
    out = work / "empty"
    assert cli.main(["synth", "--config", str(cfg), "--out", str(out)]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["samples"] == 0 and manifest["episodes"] == []


def test_unknown_config_key_rejected(work, capsys):
    cfg = write_config(work / "bad.json", synth={"episodes": [], "typo": 1})
    assert cli.main(["synth", "--config", str(cfg),
                     "--out", str(work / "x")]) == 1
    assert "typo" in capsys.readouterr().err


def test_unknown_verb_and_bad_flags_exit_one(work):
    assert cli.main(["frobnicate", "--out", str(work / "x")]) == 1
    assert cli.main(["synth"]) == 1
    assert cli.main(["synth", "--out", str(work / "x"), "--samples", "0"]) == 1
    assert cli.main(["sample", "--out", str(work / "x"),
                     "--guidance", "sideways"]) == 1


def test_missing_checkpoint_semantics(work, synth_run):
    cfg = write_config(work / "s.json", sample={"data": str(synth_run)})
    # flag absent entirely: validation error
    assert cli.main(["sample", "--config", str(cfg),
                     "--out", str(work / "x")]) == 1
    # flag points at nothing: runtime failure
    assert cli.main(["sample", "--config", str(cfg), "--out", str(work / "x"),
                     "--checkpoint", str(work / "gone.fsck")]) == 2


def test_build_data_matches_synth_shards(work, synth_run):
    cfg = write_config(work / "build.json", build={
        "logs": str(synth_run / "logs"), "dataset": {"frame_stride": 6}})
    out = work / "rebuilt"
    assert cli.main(["build-data", "--config", str(cfg),
                     "--out", str(out)]) == 0
    ours, _ = persist.read_dataset(out)
    theirs, _ = persist.read_dataset(synth_run)
    assert len(ours) == len(theirs)
    for a, b in zip(ours, theirs):
        assert np.array_equal(a.points, b.points)


def test_train_writes_checkpoints_and_loss_log(trained):
    assert (trained / "checkpoint-final.fsck").exists()
    assert (trained / "checkpoint-000004.fsck").exists()
    lines = (trained / "loss.txt").read_text().splitlines()
    assert len(lines) == 8
    steps = [int(line.split()[0]) for line in lines]
    assert steps == list(range(1, 9))
    ck = persist.load_checkpoint(trained / "checkpoint-final.fsck")
    assert ck.step == 8


def test_train_resume_reproduces_final_checkpoint(work, synth_run, trained):
    cfg = write_config(work / "resume.json", model=MODEL, train={
        "data": str(synth_run), "learning_rate": 1e-3, "batch_size": 4,
        "steps": 8})
    out = work / "resumed"
    assert cli.main(["train", "--config", str(cfg), "--seed", "3",
                     "--out", str(out),
                     "--checkpoint", str(trained / "checkpoint-000004.fsck")]) == 0
    assert (out / "checkpoint-final.fsck").read_bytes() \
        == (trained / "checkpoint-final.fsck").read_bytes()


def test_train_model_mismatch_rejected(work, synth_run, trained):
    wrong = dict(MODEL, blocks=3)
    cfg = write_config(work / "mismatch.json", model=wrong, train={
        "data": str(synth_run), "steps": 9})
    assert cli.main(["train", "--config", str(cfg), "--out", str(work / "x"),
                     "--checkpoint", str(trained / "checkpoint-final.fsck")]) == 1


def test_sample_outputs(work, synth_run, trained):
    cfg = write_config(work / "sample.json",
                       sample={"data": str(synth_run), "limit": 1})
    out = work / "samples"
    assert cli.main(["sample", "--config", str(cfg), "--seed", "5",
                     "--out", str(out), "--samples", "2",
                     "--checkpoint", str(trained / "checkpoint-final.fsck")]) == 0
    record = json.loads((out / "sample-00000.json").read_text())
    assert len(record["contours"]) == 2
    assert np.asarray(record["contours"][0]).shape == (50, 2)
    from PIL import Image
    png = Image.open(out / "sample-00000.png")
    assert png.size == (256, 128)
    assert not (out / "sample-00001.json").exists()


def test_sample_command_all_draws_one_per_command(work, synth_run, trained):
    cfg = write_config(work / "sample-all.json",
                       sample={"data": str(synth_run), "limit": 1})
    out = work / "samples-all"
    assert cli.main(["sample", "--config", str(cfg), "--out", str(out),
                     "--command", "all", "--samples", "2",
                     "--checkpoint", str(trained / "checkpoint-final.fsck")]) == 0
    record = json.loads((out / "sample-00000.json").read_text())
    assert record["commands"] == [0, 1, 2, 3, 4, 5]
    assert len(record["contours"]) == 6


def test_eval_writes_report(work, synth_run, trained, capsys):
    cfg = write_config(work / "eval.json",
                       eval={"data": str(synth_run), "limit": 2})
    out = work / "eval"
    assert cli.main(["eval", "--config", str(cfg), "--seed", "1",
                     "--out", str(out), "--samples", "2",
                     "--checkpoint", str(trained / "checkpoint-final.fsck")]) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["draws"] == 2
    assert "straight" in report["by_topology"]
    assert 0.0 <= report["overall"]["iou_best"] <= 1.0
    text = (out / "report.txt").read_text()
    assert "iou" in text and text.rstrip("\n") in capsys.readouterr().out


def test_render_draws_ground_truth_overlays(work, synth_run, trained):
    cfg = write_config(work / "render.json",
                       render={"data": str(synth_run), "limit": 1})
    out = work / "render"
    assert cli.main(["render", "--config", str(cfg), "--out", str(out),
                     "--samples", "2", "--guidance", "obstacle:1.0",
                     "--checkpoint", str(trained / "checkpoint-final.fsck")]) == 0
    from PIL import Image
    png = Image.open(out / "render-00000.png")
    assert png.size == (256, 128)
    rgb = np.asarray(png)
    assert (rgb == np.array(cli.viz.GT_COLOR)).all(axis=-1).any()


def test_template_flag_roundtrip(work, synth_run, trained):
    cfg = write_config(work / "template.json",
                       sample={"data": str(synth_run), "limit": 1,
                               "template_k": 2})
    out = work / "templated"
    assert cli.main(["sample", "--config", str(cfg), "--out", str(out),
                     "--template", "on", "--samples", "2",
                     "--checkpoint", str(trained / "checkpoint-final.fsck")]) == 0
    assert (out / "sample-00000.json").exists()
