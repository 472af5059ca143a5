"""One config document for every module, with desk/paper presets.

The document is JSON with one section per module. A preset expands first,
then file values, then --set overrides; the result is validated as a whole
and errors list every offending key.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from typing import Any, Mapping

from .errors import ConfigError
from .face_backbone import FaceBackboneConfig
from .fusion import FusionConfig
from .model import ModelConfig
from .preprocessing import NormalizationConfig, SamplingConfig
from .training import FaceBenchConfig, TrainConfig
from .video_backbone import VideoBackboneConfig

_BASE: dict[str, dict[str, Any]] = {
    "sampling": {
        "frames": 32,
        "stride": 4,
        "train_mode": "random_start",
        "clip_resolution": [224, 224],
        "face_resolution": [288, 288],
    },
    "normalization": {
        "mean": [0.45, 0.45, 0.45],
        "std": [0.225, 0.225, 0.225],
    },
    "video": {
        "patch_size": 16,
        "embed_dim": 768,
        "depth": 12,
        "heads": 12,
        "frames": 32,
        "image_size": [224, 224],
        "mlp_ratio": 4.0,
    },
    "face": {
        "out_dim": 1408,
        "widths": [48, 96, 192, 288, 352],
        "strides": [2, 2, 2, 2, 2],
        "input_hw": [288, 288],
    },
    "fusion": {
        "fused_dim": 512,
        "heads": 8,
        "dropout": 0.1,
        "num_classes": 4,
        "kv_source": "pooled",
    },
    "train": {
        "epochs": 25,
        "batch_size": 16,
        "lr": 3e-5,
        "gamma": 0.9,
        "weight_decay": 0.01,
        "grad_clip": 1.0,
        "seed": 0,
        "freeze_face": False,
    },
    "face_bench": {
        "epochs": 200,
        "batch_size": 512,
        "lr": 2e-3,
        "gamma": 0.9,
        "weight_decay": 0.01,
        "grad_clip": 1.0,
        "seed": 0,
    },
    "split": {
        "fractions": [0.76, 0.12, 0.12],
    },
    "data": {
        "source": "synthetic",       # or "frames_dir"
        "frames_dir": None,
        "manifest": None,
        "n_per_class": 4,
        "val_n_per_class": 2,
        "max_steps": None,
    },
}

_DESK_OVERRIDES: dict[str, dict[str, Any]] = {
    "sampling": {"frames": 8, "clip_resolution": [64, 64]},
    "video": {"embed_dim": 128, "depth": 4, "heads": 4, "frames": 8,
              "image_size": [64, 64]},
    "face": {"out_dim": 64, "widths": [8, 16, 32], "strides": [4, 4, 2]},
    "fusion": {"fused_dim": 64, "heads": 4},
}


@dataclass(frozen=True)
class AppConfig:
    preset: str
    sampling: SamplingConfig
    normalization: NormalizationConfig
    video: VideoBackboneConfig
    face: FaceBackboneConfig
    fusion: FusionConfig
    train: TrainConfig
    face_bench: FaceBenchConfig
    split_fractions: tuple[float, float, float]
    data: dict[str, Any]
    raw: dict[str, Any]

    @property
    def model(self) -> ModelConfig:
        return ModelConfig(video=self.video, face=self.face, fusion=self.fusion)


def preset_document(preset: str) -> dict[str, Any]:
    doc = copy.deepcopy(_BASE)
    if preset == "paper":
        pass
    elif preset == "desk":
        for section, values in _DESK_OVERRIDES.items():
            doc[section].update(copy.deepcopy(values))
    else:
        raise ConfigError(f"unknown preset {preset!r}")
    doc["preset"] = preset
    return doc


def _parse_override_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text  # bare strings are allowed unquoted


def apply_overrides(doc: dict[str, Any], overrides: Mapping[str, str]) -> list[str]:
    """Apply dotted-key overrides in place; returns the keys it rejected."""
    bad: list[str] = []
    for key, text in overrides.items():
        parts = key.split(".")
        if len(parts) != 2 or parts[0] not in doc or not isinstance(doc[parts[0]], dict):
            bad.append(key)
            continue
        section, name = parts
        if name not in doc[section]:
            bad.append(key)
            continue
        doc[section][name] = _parse_override_value(text)
    return bad


def _build(doc: dict[str, Any]) -> AppConfig:
    def tupled(section: str) -> dict[str, Any]:
        return {
            k: tuple(v) if isinstance(v, list) else v
            for k, v in doc[section].items()
        }

    errors: list[str] = []

    def attempt(factory, section: str):
        try:
            return factory()
        except (ConfigError, TypeError, ValueError) as exc:
            errors.append(f"{section}: {exc}")
            return None

    sampling = attempt(lambda: SamplingConfig(**tupled("sampling")), "sampling")
    normalization = attempt(
        lambda: NormalizationConfig(**tupled("normalization")), "normalization"
    )
    video = attempt(lambda: VideoBackboneConfig(**tupled("video")), "video")
    face = attempt(lambda: FaceBackboneConfig(**tupled("face")), "face")
    fusion = attempt(lambda: FusionConfig(**tupled("fusion")), "fusion")
    train = attempt(lambda: TrainConfig(**doc["train"]), "train")
    face_bench = attempt(lambda: FaceBenchConfig(**doc["face_bench"]), "face_bench")

    fractions = tuple(doc["split"]["fractions"])
    if len(fractions) != 3:
        errors.append("split: fractions must have 3 entries")

    if errors:
        raise ConfigError("invalid config: " + "; ".join(errors))
    return AppConfig(
        preset=doc.get("preset", "paper"),
        sampling=sampling,
        normalization=normalization,
        video=video,
        face=face,
        fusion=fusion,
        train=train,
        face_bench=face_bench,
        split_fractions=fractions,  # type: ignore[arg-type]
        data=dict(doc["data"]),
        raw=doc,
    )


def load_config(
    path: str | None = None,
    preset: str = "desk",
    overrides: Mapping[str, str] | None = None,
    seed: int | None = None,
) -> AppConfig:
    """Resolve preset -> file -> overrides into a validated AppConfig."""
    doc = preset_document(preset)
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            try:
                file_doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON ({exc.msg})") from None
        if not isinstance(file_doc, dict):
            raise ConfigError(f"{path}: config document must be an object")
        if "preset" in file_doc and file_doc["preset"] != preset:
            doc = preset_document(file_doc["preset"])
        unknown: list[str] = []
        for section, values in file_doc.items():
            if section == "preset":
                continue
            if section not in doc:
                unknown.append(section)
                continue
            if not isinstance(values, dict):
                unknown.append(section)
                continue
            for key, value in values.items():
                if key not in doc[section]:
                    unknown.append(f"{section}.{key}")
                else:
                    doc[section][key] = value
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")

    bad = apply_overrides(doc, overrides or {})
    if bad:
        raise ConfigError(f"unknown override keys: {sorted(bad)}")

    if seed is not None:
        doc["train"]["seed"] = seed
        doc["face_bench"]["seed"] = seed

    return _build(doc)


def dump_config(cfg: AppConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(cfg.raw, fh, indent=2, sort_keys=True)
        fh.write("\n")
