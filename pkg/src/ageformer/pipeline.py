"""Manifest-to-dataset plumbing shared by the CLI and the tests.

Video decoding is pluggable: any callable (record, frame_index) -> frame
works as a frame source. The built-in source reads per-video .npy frame
stacks (float in [0, 1] or uint8), which is how desk-scale runs and tests
feed the pipeline without touching codecs.
"""

from __future__ import annotations

import os

import numpy as np

from .datamodel import DatasetManifest, VideoRecord
from .preprocessing import (
    FaceInput,
    FrameSource,
    NormalizationConfig,
    SamplingConfig,
    VideoClip,
    face_input_or_zero,
    privacy_augment,
    resize_frames,
    sample_frame_indices,
    save_array_cache,
)
from .synthetic import ClipArrayDataset
from .evaluation import EvalSample


def npy_frame_source(frames_dir: str) -> FrameSource:
    """Frame source reading <frames_dir>/<record id>.npy stacks."""
    cache: dict[str, np.ndarray] = {}

    def source(record: VideoRecord, index: int) -> np.ndarray:
        if record.id not in cache:
            path = os.path.join(frames_dir, f"{record.id}.npy")
            if not os.path.exists(path):
                raise FileNotFoundError(f"no frame stack for record {record.id!r}: {path}")
            frames = np.load(path)
            if frames.dtype == np.uint8:
                frames = frames.astype(np.float32) / 255.0
            cache[record.id] = frames.astype(np.float32)
        frames = cache[record.id]
        if not 0 <= index < frames.shape[0]:
            raise IndexError(f"frame {index} out of range for record {record.id!r}")
        return frames[index]

    return source


def load_record_clip(
    record: VideoRecord,
    frame_source: FrameSource,
    cfg: SamplingConfig,
    seed: int,
    augment: str | None = None,
) -> tuple[VideoClip, FaceInput]:
    """Sample, optionally privacy-augment, and resize one record's clip.

    Augmentation happens at native resolution (boxes are in frame pixels)
    before the resize to cfg.clip_resolution. The face input comes from the
    annotation nearest the clip's center frame, or is the zero matrix.
    """
    indices = sample_frame_indices(record.frame_count, cfg, seed)
    frames = np.stack([frame_source(record, i) for i in indices])
    clip = VideoClip(frames=frames, source_indices=tuple(indices))
    if augment is not None:
        boxes = {
            t: [record.face_boxes[src].box]
            for t, src in enumerate(indices)
            if src in record.face_boxes
        }
        clip = privacy_augment(clip, boxes, augment)
    if clip.frames.shape[1:3] != cfg.clip_resolution:
        clip = VideoClip(
            frames=np.clip(resize_frames(clip.frames, cfg.clip_resolution), 0.0, 1.0),
            source_indices=clip.source_indices,
        )
    center = indices[len(indices) // 2]
    face = face_input_or_zero(record, center, frame_source, cfg.face_resolution)
    return clip, face


def build_clip_dataset(
    manifest: DatasetManifest,
    frame_source: FrameSource,
    cfg: SamplingConfig,
    norm: NormalizationConfig,
    seed: int = 0,
    augment: str | None = None,
) -> ClipArrayDataset:
    """Materialize a (clip, face, label) dataset from a manifest."""
    clips, faces, labels = [], [], []
    any_face = False
    for i, record in enumerate(manifest):
        clip, face = load_record_clip(record, frame_source, cfg, seed + i, augment)
        clips.append(clip.frames)
        faces.append(face)
        labels.append(int(record.label))
        any_face = any_face or face.present
    face_array = present = None
    if any_face:
        face_array = np.stack([f.pixels.astype(np.float32) for f in faces])
        present = np.asarray([f.present for f in faces], dtype=bool)
    return ClipArrayDataset(
        clips=np.stack(clips),
        labels=np.asarray(labels, dtype=np.int64),
        norm=norm,
        faces=face_array,
        face_present=present,
        face_size=cfg.face_resolution,
    )


def build_face_dataset_arrays(
    manifest: DatasetManifest,
    frame_source: FrameSource,
    cfg: SamplingConfig,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Aligned face crops + labels, several frames per video.

    This is the face-only image dataset derivation: sample frames with the
    10-frame stride-4 config, align each annotated sample by its eye
    landmarks, and skip videos without any face annotation.
    """
    faces, labels = [], []
    for i, record in enumerate(manifest):
        if not record.face_boxes:
            continue
        indices = sample_frame_indices(record.frame_count, cfg, seed + i)
        for idx in set(indices):
            face = face_input_or_zero(record, idx, frame_source, cfg.face_resolution)
            if face.present:
                faces.append(face.pixels.astype(np.float32))
                labels.append(int(record.label))
    if not faces:
        raise ValueError("no faces could be extracted from the manifest")
    return np.stack(faces), np.asarray(labels, dtype=np.int64)


def build_eval_samples(
    manifest: DatasetManifest,
    frame_source: FrameSource,
    cfg: SamplingConfig,
) -> list[EvalSample]:
    """Full-source evaluation samples (sweeps re-cut clips per setting)."""
    samples = []
    for record in manifest:
        frames = np.stack(
            [frame_source(record, i) for i in range(record.frame_count)]
        )
        center = record.frame_count // 2
        face = face_input_or_zero(record, center, frame_source, cfg.face_resolution)
        samples.append(EvalSample(frames=frames, label=record.label, face=face))
    return samples


def cache_dataset(
    manifest: DatasetManifest,
    frame_source: FrameSource,
    cfg: SamplingConfig,
    out_dir: str,
    seed: int = 0,
    augment: str | None = None,
) -> list[dict]:
    """Write one clip cache + face cache per record; returns the index rows."""
    os.makedirs(out_dir, exist_ok=True)
    index = []
    for i, record in enumerate(manifest):
        clip, face = load_record_clip(record, frame_source, cfg, seed + i, augment)
        clip_path = os.path.join(out_dir, f"{record.id}.clip.bin")
        face_path = os.path.join(out_dir, f"{record.id}.face.bin")
        save_array_cache(clip_path, clip.frames)
        save_array_cache(face_path, face.pixels)
        index.append(
            {
                "id": record.id,
                "label": int(record.label),
                "clip": os.path.basename(clip_path),
                "face": os.path.basename(face_path),
                "face_present": face.present,
                "source_indices": list(clip.source_indices),
            }
        )
    return index
