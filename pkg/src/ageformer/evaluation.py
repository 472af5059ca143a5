"""Metrics, attention rollout, robustness sweeps, and tracklet inference."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .datamodel import AgeClass, VideoRecord
from .fusion import ClassDistribution
from .model import AgeFormer, predict
from .preprocessing import (
    FaceInput,
    FrameSource,
    NormalizationConfig,
    SamplingConfig,
    VideoClip,
    degrade_resolution,
    face_input_or_zero,
    resize_frames,
    sample_frame_indices,
    zero_face,
)
from .video_backbone import AttentionRecord

logger = logging.getLogger(__name__)

N_CLASSES = 4


class EvaluationError(ValueError):
    """Raised for unusable evaluation inputs (length mismatch, no record...)."""


# ---------------------------------------------------------------------------
# Classification metrics.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ClassMetrics:
    precision: float
    recall: float
    f1: float


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    per_class: tuple[ClassMetrics, ...]
    macro_precision: float
    macro_recall: float
    macro_f1: float
    confusion: np.ndarray  # rows ground truth, columns predicted
    n_samples: int

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
            "per_class": [
                {"class": AgeClass(i).name, "precision": m.precision,
                 "recall": m.recall, "f1": m.f1}
                for i, m in enumerate(self.per_class)
            ],
            "confusion": self.confusion.tolist(),
            "n_samples": self.n_samples,
        }


def compute_metrics(
    preds: Sequence[AgeClass | int], labels: Sequence[AgeClass | int]
) -> MetricsReport:
    """Accuracy, per-class and macro precision/recall/F1, confusion matrix.

    0/0 ratios (a class never predicted, never present, or with zero F1
    denominator) are defined as 0 so small-set reports stay deterministic.
    """
    if len(preds) != len(labels):
        raise EvaluationError(
            f"preds ({len(preds)}) and labels ({len(labels)}) differ in length"
        )
    if len(preds) == 0:
        raise EvaluationError("cannot compute metrics on empty inputs")

    confusion = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    for p, t in zip(preds, labels):
        confusion[int(t), int(p)] += 1

    per_class = []
    for c in range(N_CLASSES):
        tp = int(confusion[c, c])
        fp = int(confusion[:, c].sum()) - tp
        fn = int(confusion[c, :].sum()) - tp
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        per_class.append(ClassMetrics(precision=precision, recall=recall, f1=f1))

    return MetricsReport(
        accuracy=float(np.trace(confusion)) / len(preds),
        per_class=tuple(per_class),
        macro_precision=sum(m.precision for m in per_class) / N_CLASSES,
        macro_recall=sum(m.recall for m in per_class) / N_CLASSES,
        macro_f1=sum(m.f1 for m in per_class) / N_CLASSES,
        confusion=confusion,
        n_samples=len(preds),
    )


# ---------------------------------------------------------------------------
# Attention rollout.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RolloutMap:
    """Per-frame heatmaps in [0, 1], max 1 across the clip (unless all-zero)."""

    frames: np.ndarray  # (T, H, W)
    class_row: np.ndarray  # composed class-token row over all tokens, length S


def rollout_matrices(record: AttentionRecord) -> np.ndarray:
    """Compose (A + I)/2, head-averaged, across sublayers in forward order."""
    s = 1 + record.n_patches * record.frames
    eye = np.eye(s, dtype=np.float64)
    composed = eye
    for layer in record.layers:
        for matrix in (layer.temporal, layer.spatial):
            avg = matrix.mean(axis=0)
            step = avg + eye
            step /= step.sum(axis=1, keepdims=True)
            composed = step @ composed
    return composed


def rollout_from_record(
    record: AttentionRecord, out_hw: tuple[int, int]
) -> RolloutMap:
    composed = rollout_matrices(record)
    class_row = composed[0]
    n, t = record.n_patches, record.frames
    gh, gw = record.patch_grid
    patch_scores = class_row[1:].reshape(t, gh, gw)
    h, w = out_hw
    # Nearest-neighbor patch expansion keeps each patch's attribution exact.
    maps = np.kron(patch_scores, np.ones((1, h // gh, w // gw)))
    peak = maps.max()
    if peak > 0:
        maps = maps / peak
    return RolloutMap(frames=maps, class_row=class_row)


def attention_rollout(model, clip: torch.Tensor) -> RolloutMap:
    """Rollout heatmaps for one clip (batch of 1, already normalized).

    `model` must expose the divided-attention record: an AgeFormer or a bare
    VideoBackbone both work.
    """
    backbone = getattr(model, "video_backbone", model)
    if not hasattr(backbone, "forward_tokens") or not hasattr(backbone, "cfg"):
        raise EvaluationError(
            "model does not expose a video backbone with attention records"
        )
    backbone.eval()
    with torch.no_grad():
        _, record = backbone(clip, record=True)
    if record is None or not record.layers:
        raise EvaluationError("attention record is empty")
    return rollout_from_record(record, backbone.cfg.image_size)


# ---------------------------------------------------------------------------
# Robustness sweeps.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EvalSample:
    """Source material for one evaluation clip: full frames + face + label."""

    frames: np.ndarray  # (F, H, W, 3) in [0, 1]
    label: AgeClass
    face: FaceInput = field(default_factory=zero_face)


@dataclass(frozen=True)
class SweepPoint:
    setting: int
    metrics: MetricsReport


@dataclass(frozen=True)
class SweepReport:
    axis: str
    points: tuple[SweepPoint, ...]

    def to_dict(self) -> dict:
        return {
            "axis": self.axis,
            "points": [
                {"setting": p.setting, "metrics": p.metrics.to_dict()}
                for p in self.points
            ],
        }


Predictor = Callable[[np.ndarray, FaceInput], AgeClass]


def build_eval_clip(
    sample: EvalSample, cfg: SamplingConfig, stride: int | None = None
) -> VideoClip:
    """Cut the evaluation clip (center start) at the configured or given stride."""
    if stride is not None and stride != cfg.stride:
        cfg = SamplingConfig(
            frames=cfg.frames, stride=stride, train_mode="center_start",
            clip_resolution=cfg.clip_resolution, face_resolution=cfg.face_resolution,
        )
    elif cfg.train_mode != "center_start":
        cfg = SamplingConfig(
            frames=cfg.frames, stride=cfg.stride, train_mode="center_start",
            clip_resolution=cfg.clip_resolution, face_resolution=cfg.face_resolution,
        )
    indices = sample_frame_indices(sample.frames.shape[0], cfg)
    frames = sample.frames[indices]
    if frames.shape[1:3] != cfg.clip_resolution:
        frames = resize_frames(frames, cfg.clip_resolution)
    return VideoClip(frames=frames.astype(np.float32), source_indices=tuple(indices))


def evaluate_samples(
    predictor: Predictor,
    samples: Sequence[EvalSample],
    cfg: SamplingConfig,
    low_res: tuple[int, int] | None = None,
    stride: int | None = None,
) -> MetricsReport:
    preds, labels = [], []
    for sample in samples:
        clip = build_eval_clip(sample, cfg, stride)
        if low_res is not None and low_res != clip.frames.shape[1:3]:
            clip = degrade_resolution(clip, low_res)
        preds.append(predictor(clip.frames, sample.face))
        labels.append(sample.label)
    return compute_metrics(preds, labels)


def robustness_sweep(
    predictor: Predictor,
    samples: Sequence[EvalSample],
    axis: str,
    settings: Sequence[int],
    cfg: SamplingConfig,
) -> SweepReport:
    """Evaluate at each setting, varying only the swept parameter.

    axis "resolution": frames are degraded to (s, s) and restored;
    axis "stride": clips are re-sampled at stride s. Settings must be
    strictly monotonic.
    """
    if axis not in ("resolution", "stride"):
        raise EvaluationError(f"unknown sweep axis {axis!r}")
    if len(settings) == 0:
        raise EvaluationError("sweep needs at least one setting")
    diffs = np.diff(list(settings))
    if len(settings) > 1 and not (np.all(diffs > 0) or np.all(diffs < 0)):
        raise EvaluationError(f"settings must be strictly ordered, got {list(settings)}")

    points = []
    for s in settings:
        if axis == "resolution":
            report = evaluate_samples(predictor, samples, cfg, low_res=(int(s), int(s)))
        else:
            report = evaluate_samples(predictor, samples, cfg, stride=int(s))
        points.append(SweepPoint(setting=int(s), metrics=report))
    return SweepReport(axis=axis, points=tuple(points))


def model_predictor(model: AgeFormer, norm: NormalizationConfig) -> Predictor:
    """Wrap a trained model as a (clip frames, face) -> AgeClass callable."""

    def _predict(frames: np.ndarray, face: FaceInput) -> AgeClass:
        return predict(model, frames, face, norm).predicted

    return _predict


# ---------------------------------------------------------------------------
# Tracklet inference.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrackletPrediction:
    tracklet_id: str
    age_class: AgeClass
    distribution: ClassDistribution


def _crop_box(frame: np.ndarray, box) -> np.ndarray:
    h, w = frame.shape[:2]
    x1 = int(np.clip(np.floor(box[0]), 0, w - 1))
    y1 = int(np.clip(np.floor(box[1]), 0, h - 1))
    x2 = int(np.clip(np.ceil(box[2]), x1 + 1, w))
    y2 = int(np.clip(np.ceil(box[3]), y1 + 1, h))
    return frame[y1:y2, x1:x2]


def infer_tracklets(
    model: AgeFormer,
    tracklets: Sequence[VideoRecord],
    frame_source: FrameSource,
    cfg: SamplingConfig,
    norm: NormalizationConfig,
) -> list[TrackletPrediction]:
    """Predict an age class for each person tracklet (no labels involved).

    Each tracklet record carries per-frame person boxes from an external
    detector/tracker. The box region is cropped per sampled frame, resized
    to the clip resolution, and run through the model; the face input comes
    from the record's face annotations or defaults to the zero matrix.
    Tracklets without any person box are skipped with a warning.
    """
    out: list[TrackletPrediction] = []
    for rec in tracklets:
        if not rec.person_boxes or rec.frame_count < 1:
            logger.warning("skipping tracklet %s: no usable person boxes", rec.id)
            continue
        indices = sample_frame_indices(rec.frame_count, cfg)
        annotated = sorted(rec.person_boxes)
        frames = []
        for idx in indices:
            # Use the nearest annotated frame's box for unannotated frames.
            box_frame = min(annotated, key=lambda k: (abs(k - idx), k))
            frame = frame_source(rec, idx)
            crop = _crop_box(frame, rec.person_boxes[box_frame])
            frames.append(resize_frames(crop, cfg.clip_resolution))
        clip = np.stack(frames).astype(np.float32)
        center = indices[len(indices) // 2]
        face = face_input_or_zero(rec, center, frame_source, cfg.face_resolution)
        dist = predict(model, clip, face, norm)
        out.append(
            TrackletPrediction(
                tracklet_id=rec.id, age_class=dist.predicted, distribution=dist
            )
        )
    return out
