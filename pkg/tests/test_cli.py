import json
import os

import numpy as np
import pytest

from ageformer.cli import main
from ageformer.config import load_config
from ageformer.errors import ConfigError


@pytest.fixture
def toy_data(tmp_path):
    frames_dir = tmp_path / "frames"
    frames_dir.mkdir()
    rng = np.random.default_rng(0)
    labels = ["baby", "teen", "adult", "elderly"]
    rows = []
    for i in range(12):
        rid = f"v{i}"
        frames = rng.uniform(0, 1, size=(40, 32, 48, 3)).astype(np.float32)
        np.save(frames_dir / f"{rid}.npy", frames)
        row = {
            "id": rid, "path": f"frames/{rid}.npy", "label": labels[i % 4],
            "frame_count": 40, "fps": 27.0,
        }
        if i % 3 == 0:
            row["face_boxes"] = {
                "5": {"box": [8, 8, 28, 26], "eyes": [[14, 15], [22, 15]]}
            }
            row["person_boxes"] = {"0": [2, 2, 30, 30]}
        rows.append(row)
    manifest = tmp_path / "toy.jsonl"
    manifest.write_text("".join(json.dumps(r) + "\n" for r in rows))
    return tmp_path, str(manifest), str(frames_dir)


def test_split_writes_three_manifests_and_stats(toy_data):
    tmp_path, manifest, _ = toy_data
    out = str(tmp_path / "split")
    assert main(["split", "--manifest", manifest, "--out-dir", out, "--seed", "1"]) == 0
    for name in ("tagged.jsonl", "train.jsonl", "val.jsonl", "test.jsonl",
                 "stats.json", "config.json"):
        assert os.path.exists(os.path.join(out, name)), name
    stats = json.load(open(os.path.join(out, "stats.json")))
    assert stats["total_videos"] == 12


def test_split_is_reproducible_and_does_not_mutate_inputs(toy_data):
    tmp_path, manifest, _ = toy_data
    before = open(manifest, "rb").read()
    out1, out2 = str(tmp_path / "s1"), str(tmp_path / "s2")
    assert main(["split", "--manifest", manifest, "--out-dir", out1, "--seed", "5"]) == 0
    assert main(["split", "--manifest", manifest, "--out-dir", out2, "--seed", "5"]) == 0
    a = open(os.path.join(out1, "tagged.jsonl"), "rb").read()
    b = open(os.path.join(out2, "tagged.jsonl"), "rb").read()
    assert a == b
    assert open(manifest, "rb").read() == before


def test_patch_divisibility_override_is_schema_error(toy_data, capsys):
    tmp_path, manifest, _ = toy_data
    code = main([
        "stats", "--manifest", manifest,
        "--out-dir", str(tmp_path / "x"),
        "--set", "video.patch_size=17",
    ])
    assert code == 2
    err = capsys.readouterr().err
    assert "video" in err and "17" in err


def test_unknown_override_key_is_schema_error(toy_data, capsys):
    tmp_path, manifest, _ = toy_data
    code = main([
        "stats", "--manifest", manifest,
        "--out-dir", str(tmp_path / "x"),
        "--set", "model.patch=17",
    ])
    assert code == 2
    assert "model.patch" in capsys.readouterr().err


def test_missing_manifest_is_io_error(tmp_path, capsys):
    code = main(["stats", "--manifest", str(tmp_path / "nope.jsonl"),
                 "--out-dir", str(tmp_path / "x")])
    assert code == 3


def test_preprocess_and_augment_write_caches(toy_data):
    tmp_path, manifest, frames_dir = toy_data
    out = str(tmp_path / "prep")
    assert main(["preprocess", "--manifest", manifest, "--frames-dir", frames_dir,
                 "--out-dir", out]) == 0
    index = [json.loads(l) for l in open(os.path.join(out, "index.jsonl"))]
    assert len(index) == 12
    assert os.path.exists(os.path.join(out, "v0.clip.bin"))

    out2 = str(tmp_path / "aug")
    assert main(["augment", "--manifest", manifest, "--frames-dir", frames_dir,
                 "--mode", "blackout", "--out-dir", out2]) == 0
    from ageformer.preprocessing import load_array_cache
    clip = load_array_cache(os.path.join(out2, "v0.clip.bin"))
    assert clip.shape == (8, 64, 64, 3)


def test_train_eval_sweep_rollout_roundtrip(tmp_path):
    # one synthetic training step, then drive eval / sweep / rollout off it
    train_dir = str(tmp_path / "train")
    code = main([
        "train", "--out-dir", train_dir, "--seed", "0",
        "--set", "data.n_per_class=1", "--set", "data.val_n_per_class=1",
        "--set", "data.max_steps=1", "--set", "train.epochs=1",
        "--set", "train.batch_size=4",
    ])
    assert code == 0
    ckpt = os.path.join(train_dir, "last.ckpt")
    assert os.path.exists(ckpt)

    eval_dir = str(tmp_path / "eval")
    assert main(["eval", "--checkpoint", ckpt, "--out-dir", eval_dir,
                 "--set", "data.val_n_per_class=1"]) == 0
    metrics = json.load(open(os.path.join(eval_dir, "metrics.json")))
    assert metrics["n_samples"] == 4

    sweep_dir = str(tmp_path / "sweep")
    assert main(["sweep", "--checkpoint", ckpt, "--axis", "resolution",
                 "--settings", "64,32,16", "--out-dir", sweep_dir]) == 0
    sweep = json.load(open(os.path.join(sweep_dir, "sweep.json")))
    assert [p["setting"] for p in sweep["points"]] == [64, 32, 16]

    from ageformer.preprocessing import save_array_cache
    from ageformer.synthetic import make_clip

    clip_path = str(tmp_path / "one.clip.bin")
    save_array_cache(clip_path, make_clip(2, seed=0))
    roll_dir = str(tmp_path / "rollout")
    assert main(["rollout", "--checkpoint", ckpt, "--clip", clip_path,
                 "--out-dir", roll_dir]) == 0
    assert os.path.exists(os.path.join(roll_dir, "rollout.bin"))
    assert os.path.exists(os.path.join(roll_dir, "frame_000.png"))


def test_train_face_runs_one_step(tmp_path):
    out = str(tmp_path / "tf")
    code = main([
        "train-face", "--out-dir", out, "--seed", "0",
        "--set", "data.n_per_class=1", "--set", "data.max_steps=1",
        "--set", "face_bench.epochs=1", "--set", "face_bench.batch_size=4",
    ])
    assert code == 0
    assert os.path.exists(os.path.join(out, "last.ckpt"))


def test_infer_cli(toy_data, tmp_path):
    train_dir = str(tmp_path / "train")
    assert main([
        "train", "--out-dir", train_dir, "--seed", "0",
        "--set", "data.n_per_class=1", "--set", "data.val_n_per_class=0",
        "--set", "data.max_steps=1", "--set", "train.epochs=1",
        "--set", "train.batch_size=4",
    ]) == 0
    data_path, manifest, frames_dir = toy_data
    out = str(tmp_path / "infer")
    assert main(["infer", "--checkpoint", os.path.join(train_dir, "last.ckpt"),
                 "--manifest", manifest, "--frames-dir", frames_dir,
                 "--out-dir", out]) == 0
    preds = [json.loads(l) for l in open(os.path.join(out, "predictions.jsonl"))]
    assert len(preds) == 4  # only records with person boxes
    assert all(len(p["probs"]) == 4 for p in preds)


def test_config_file_roundtrip(tmp_path):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({"train": {"lr": 1e-4}, "preset": "desk"}))
    cfg = load_config(str(cfg_path), preset="desk")
    assert cfg.train.lr == 1e-4
    assert cfg.video.embed_dim == 128

    cfg_path.write_text(json.dumps({"train": {"nonsense": 1}}))
    with pytest.raises(ConfigError, match="train.nonsense"):
        load_config(str(cfg_path), preset="desk")
