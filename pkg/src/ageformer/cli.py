"""Command-line entry point exposing every pipeline stage.

Every run writes its resolved config into the output directory, so a run
directory is self-describing: re-running with that config and the same
seed reproduces the outputs. Environment variables are never consulted.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np
import torch

from .checkpoint import load_checkpoint, model_config_from_dict
from .config import AppConfig, dump_config, load_config
from .datamodel import (
    ManifestError,
    SplitError,
    SplitSpec,
    dataset_stats,
    load_manifest,
    stratified_split,
    write_manifest,
)
from .errors import CheckpointError, ConfigError
from .evaluation import (
    EvaluationError,
    attention_rollout,
    evaluate_samples,
    infer_tracklets,
    model_predictor,
    robustness_sweep,
)
from .model import AgeFormer, prepare_inputs
from .pipeline import (
    build_clip_dataset,
    build_eval_samples,
    build_face_dataset_arrays,
    cache_dataset,
    npy_frame_source,
)
from .preprocessing import (
    FACE_DATASET_SAMPLING,
    load_array_cache,
    save_array_cache,
    zero_face,
)
from .evaluation import EvalSample
from .synthetic import (
    ClipArrayDataset,
    FaceArrayDataset,
    SyntheticConfig,
    make_clip_dataset,
    make_face_dataset,
)
from .training import train_ageformer, train_face_benchmark

COMMANDS = ("split", "stats", "preprocess", "train", "train-face", "eval",
            "infer", "rollout", "sweep", "augment")


def _parse_args(argv):
    parser = argparse.ArgumentParser(prog="ageformer")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="config document (JSON)")
        p.add_argument("--preset", default="desk", choices=["desk", "paper"])
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="dotted config override")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out-dir", default=None)

    p = sub.add_parser("split", help="stratified train/val/test split")
    common(p)
    p.add_argument("--manifest", required=True)

    p = sub.add_parser("stats", help="dataset statistics report")
    common(p)
    p.add_argument("--manifest", required=True)

    p = sub.add_parser("preprocess", help="cache clips + faces for a manifest")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--frames-dir", required=True)

    p = sub.add_parser("augment", help="cache privacy-augmented clips")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--frames-dir", required=True)
    p.add_argument("--mode", required=True, choices=["blur", "blackout"])

    p = sub.add_parser("train", help="train the two-stream model")
    common(p)
    p.add_argument("--manifest", default=None)
    p.add_argument("--frames-dir", default=None)

    p = sub.add_parser("train-face", help="train the face-only benchmark")
    common(p)
    p.add_argument("--manifest", default=None)
    p.add_argument("--frames-dir", default=None)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", default=None)
    p.add_argument("--frames-dir", default=None)

    p = sub.add_parser("infer", help="per-tracklet inference")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--frames-dir", required=True)

    p = sub.add_parser("rollout", help="attention rollout heatmaps for a clip")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--clip", required=True, help="clip cache file (raw [0,1] frames)")

    p = sub.add_parser("sweep", help="robustness sweep over resolution or stride")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--axis", required=True, choices=["resolution", "stride"])
    p.add_argument("--settings", required=True, help="comma-separated values")
    p.add_argument("--manifest", default=None)
    p.add_argument("--frames-dir", default=None)

    return parser.parse_args(argv)


def _resolve_config(args) -> AppConfig:
    overrides = {}
    for item in args.overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key=value")
        key, value = item.split("=", 1)
        overrides[key] = value
    return load_config(args.config, preset=args.preset, overrides=overrides,
                       seed=args.seed)


def _load_model(path: str) -> tuple[AgeFormer, dict]:
    tensors, configs, meta = load_checkpoint(path)
    if "model" not in configs or "video" not in configs["model"]:
        raise CheckpointError(f"{path}: checkpoint does not hold a full model config")
    model = AgeFormer(model_config_from_dict(configs["model"]))
    state = model.state_dict()
    for name, tensor in tensors.items():
        if name not in state:
            raise CheckpointError(f"{path}: unexpected tensor {name!r}")
        if tuple(tensor.shape) != tuple(state[name].shape):
            raise CheckpointError(
                f"{path}: shape mismatch for {name!r}: "
                f"{tuple(tensor.shape)} vs {tuple(state[name].shape)}"
            )
    model.load_state_dict({k: v.to(state[k].dtype) for k, v in tensors.items()})
    model.eval()
    return model, meta


def _synth_cfg(cfg: AppConfig) -> SyntheticConfig:
    return SyntheticConfig(
        frames=cfg.sampling.frames,
        image_size=cfg.sampling.clip_resolution,
        face_size=cfg.sampling.face_resolution,
    )


def _train_datasets(args, cfg: AppConfig):
    data = cfg.data
    if data.get("source") == "synthetic":
        sc = _synth_cfg(cfg)
        seed = cfg.train.seed
        clips, labels = make_clip_dataset(int(data["n_per_class"]), seed, sc)
        train_ds = ClipArrayDataset(clips, labels, cfg.normalization,
                                    face_size=cfg.sampling.face_resolution)
        val_ds = None
        if data.get("val_n_per_class"):
            vc, vl = make_clip_dataset(int(data["val_n_per_class"]), seed + 9999, sc)
            val_ds = ClipArrayDataset(vc, vl, cfg.normalization,
                                      face_size=cfg.sampling.face_resolution)
        return train_ds, val_ds
    manifest_path = args.manifest or data.get("manifest")
    frames_dir = args.frames_dir or data.get("frames_dir")
    if not manifest_path or not frames_dir:
        raise ConfigError("frames_dir data source needs --manifest and --frames-dir")
    manifest = load_manifest(manifest_path)
    source = npy_frame_source(frames_dir)
    train_m = manifest.subset("train")
    val_m = manifest.subset("val")
    if len(train_m) == 0:
        raise ManifestError("manifest has no records tagged train (run split first)")
    train_ds = build_clip_dataset(train_m, source, cfg.sampling, cfg.normalization,
                                  seed=cfg.train.seed)
    val_ds = None
    if len(val_m):
        val_ds = build_clip_dataset(val_m, source, cfg.sampling, cfg.normalization,
                                    seed=cfg.train.seed + 1)
    return train_ds, val_ds


def _eval_samples(args, cfg: AppConfig):
    data = cfg.data
    if (args.manifest or data.get("manifest")) and (args.frames_dir or data.get("frames_dir")):
        manifest = load_manifest(args.manifest or data["manifest"])
        source = npy_frame_source(args.frames_dir or data["frames_dir"])
        subset = manifest.subset("test")
        if len(subset) == 0:
            subset = manifest
        return build_eval_samples(subset, source, cfg.sampling)
    sc = _synth_cfg(cfg)
    clips, labels = make_clip_dataset(int(data.get("val_n_per_class") or 2),
                                      cfg.train.seed + 4242, sc)
    return [EvalSample(frames=c, label=int(l)) for c, l in zip(clips, labels)]


# ---------------------------------------------------------------------------
# Command handlers.
# ---------------------------------------------------------------------------


def _cmd_split(args, cfg, out_dir):
    manifest = load_manifest(args.manifest)
    spec = SplitSpec(fractions=cfg.split_fractions,
                     seed=args.seed if args.seed is not None else 0)
    tagged = stratified_split(manifest, spec)
    write_manifest(tagged, os.path.join(out_dir, "tagged.jsonl"))
    for tag in ("train", "val", "test"):
        write_manifest(tagged.subset(tag), os.path.join(out_dir, f"{tag}.jsonl"))
    report = dataset_stats(tagged)
    with open(os.path.join(out_dir, "stats.json"), "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2)
    print(json.dumps({tag: len(tagged.subset(tag)) for tag in ("train", "val", "test")}))


def _cmd_stats(args, cfg, out_dir):
    report = dataset_stats(load_manifest(args.manifest))
    payload = report.to_dict()
    with open(os.path.join(out_dir, "stats.json"), "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
    print(json.dumps(payload, indent=2))


def _cmd_preprocess(args, cfg, out_dir, augment=None):
    manifest = load_manifest(args.manifest)
    source = npy_frame_source(args.frames_dir)
    seed = args.seed if args.seed is not None else 0
    index = cache_dataset(manifest, source, cfg.sampling, out_dir,
                          seed=seed, augment=augment)
    with open(os.path.join(out_dir, "index.jsonl"), "w", encoding="utf-8") as fh:
        for row in index:
            fh.write(json.dumps(row) + "\n")
    print(f"cached {len(index)} clips to {out_dir}")


def _cmd_train(args, cfg, out_dir):
    train_ds, val_ds = _train_datasets(args, cfg)
    max_steps = cfg.data.get("max_steps")
    result = train_ageformer(train_ds, val_ds, cfg.model, cfg.train,
                             out_dir=out_dir,
                             max_steps=int(max_steps) if max_steps else None)
    last = result.logs[-1]
    print(json.dumps({"epochs": len(result.logs), "steps": result.steps,
                      "train_loss": last.train_loss, "val_acc": last.val_acc}))


def _cmd_train_face(args, cfg, out_dir):
    data = cfg.data
    if data.get("source") == "synthetic":
        sc = _synth_cfg(cfg)
        faces, labels = make_face_dataset(int(data["n_per_class"]),
                                          cfg.face_bench.seed, sc)
        train_ds = FaceArrayDataset(faces, labels, cfg.normalization)
        val_ds = None
    else:
        manifest_path = args.manifest or data.get("manifest")
        frames_dir = args.frames_dir or data.get("frames_dir")
        if not manifest_path or not frames_dir:
            raise ConfigError("frames_dir data source needs --manifest and --frames-dir")
        manifest = load_manifest(manifest_path)
        source = npy_frame_source(frames_dir)
        faces, labels = build_face_dataset_arrays(
            manifest, source, FACE_DATASET_SAMPLING, seed=cfg.face_bench.seed
        )
        train_ds, val_ds = FaceArrayDataset(faces, labels, cfg.normalization), None
    max_steps = cfg.data.get("max_steps")
    result = train_face_benchmark(train_ds, val_ds, cfg.face, cfg.face_bench,
                                  out_dir=out_dir,
                                  max_steps=int(max_steps) if max_steps else None)
    print(json.dumps({"epochs": len(result.logs), "steps": result.steps,
                      "train_loss": result.logs[-1].train_loss}))


def _cmd_eval(args, cfg, out_dir):
    model, _ = _load_model(args.checkpoint)
    samples = _eval_samples(args, cfg)
    predictor = model_predictor(model, cfg.normalization)
    report = evaluate_samples(predictor, samples, cfg.sampling)
    with open(os.path.join(out_dir, "metrics.json"), "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2)
    print(json.dumps({"accuracy": report.accuracy, "macro_f1": report.macro_f1,
                      "n": report.n_samples}))


def _cmd_infer(args, cfg, out_dir):
    model, _ = _load_model(args.checkpoint)
    manifest = load_manifest(args.manifest)
    source = npy_frame_source(args.frames_dir)
    preds = infer_tracklets(model, list(manifest), source, cfg.sampling,
                            cfg.normalization)
    path = os.path.join(out_dir, "predictions.jsonl")
    with open(path, "w", encoding="utf-8") as fh:
        for p in preds:
            fh.write(json.dumps({
                "id": p.tracklet_id,
                "age_class": p.age_class.name,
                "probs": [float(x) for x in p.distribution.probs],
            }) + "\n")
    print(f"wrote {len(preds)} predictions to {path}")


def _cmd_rollout(args, cfg, out_dir):
    from PIL import Image

    model, _ = _load_model(args.checkpoint)
    frames = load_array_cache(args.clip)
    clip, _face = prepare_inputs(frames, zero_face(cfg.sampling.face_resolution),
                                 cfg.normalization)
    rollout = attention_rollout(model, clip)
    save_array_cache(os.path.join(out_dir, "rollout.bin"),
                     rollout.frames.astype(np.float32))
    for t in range(rollout.frames.shape[0]):
        img = Image.fromarray((rollout.frames[t] * 255).astype(np.uint8), mode="L")
        img.save(os.path.join(out_dir, f"frame_{t:03d}.png"))
    print(f"wrote {rollout.frames.shape[0]} heatmaps to {out_dir}")


def _cmd_sweep(args, cfg, out_dir):
    model, _ = _load_model(args.checkpoint)
    try:
        settings = [int(s) for s in args.settings.split(",") if s]
    except ValueError:
        raise EvaluationError(f"bad --settings {args.settings!r}") from None
    samples = _eval_samples(args, cfg)
    predictor = model_predictor(model, cfg.normalization)
    report = robustness_sweep(predictor, samples, args.axis, settings, cfg.sampling)
    with open(os.path.join(out_dir, "sweep.json"), "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2)
    print(json.dumps({
        "axis": report.axis,
        "points": [{"setting": p.setting, "accuracy": p.metrics.accuracy}
                   for p in report.points],
    }))


_HANDLERS = {
    "split": _cmd_split,
    "stats": _cmd_stats,
    "preprocess": _cmd_preprocess,
    "augment": lambda a, c, o: _cmd_preprocess(a, c, o, augment=a.mode),
    "train": _cmd_train,
    "train-face": _cmd_train_face,
    "eval": _cmd_eval,
    "infer": _cmd_infer,
    "rollout": _cmd_rollout,
    "sweep": _cmd_sweep,
}


def main(argv=None) -> int:
    args = _parse_args(argv if argv is not None else sys.argv[1:])
    try:
        cfg = _resolve_config(args)
        out_dir = args.out_dir or os.path.join("runs", args.command)
        os.makedirs(out_dir, exist_ok=True)
        dump_config(cfg, os.path.join(out_dir, "config.json"))
        if args.seed is not None:
            torch.manual_seed(args.seed)
        _HANDLERS[args.command](args, cfg, out_dir)
        return 0
    except ConfigError as exc:
        print(f"error[config]: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, OSError) as exc:
        print(f"error[io]: {exc}", file=sys.stderr)
        return 3
    except (ManifestError, SplitError, CheckpointError, EvaluationError,
            ValueError) as exc:
        print(f"error[data]: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
