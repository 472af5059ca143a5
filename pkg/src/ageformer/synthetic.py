"""Synthetic desk-scale datasets with known ground truth.

Clips show a single moving figure whose body scale and sway (gait)
frequency both encode the class, so the generator's labels double as an
oracle for learning tests: class 0 is a small fast-moving figure, class 3
large and slow. Faces default to the absent-face zero matrix, which keeps
the supporting stream on its no-face path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .datamodel import AgeClass
from .preprocessing import NormalizationConfig, normalize_clip

N_CLASSES = 4

# Per-class figure geometry: body height fraction and sway cycles per clip.
BODY_HEIGHT_FRACTION = (0.22, 0.40, 0.58, 0.76)
SWAY_CYCLES = (3.0, 2.3, 1.6, 0.9)


@dataclass(frozen=True)
class SyntheticConfig:
    frames: int = 8
    image_size: tuple[int, int] = (64, 64)
    face_size: tuple[int, int] = (288, 288)
    noise: float = 0.03


def _draw_figure(
    h: int, w: int, cy: float, cx: float, body_h: float, body_w: float
) -> np.ndarray:
    """Filled ellipse 'body' with a smaller 'head' disc above it."""
    ys, xs = np.mgrid[0:h, 0:w]
    body = ((ys - cy) / (body_h / 2)) ** 2 + ((xs - cx) / (body_w / 2)) ** 2 <= 1.0
    head_r = body_w * 0.35
    head_cy = cy - body_h / 2 - head_r * 0.6
    head = (ys - head_cy) ** 2 + (xs - cx) ** 2 <= head_r**2
    return (body | head).astype(np.float32)


def make_clip(label: int, seed: int, cfg: SyntheticConfig = SyntheticConfig()) -> np.ndarray:
    """One (T, H, W, 3) clip in [0, 1] for the given class."""
    rng = np.random.default_rng([seed, label])
    h, w = cfg.image_size
    t = cfg.frames
    body_h = BODY_HEIGHT_FRACTION[label] * h
    body_w = 0.45 * body_h
    cycles = SWAY_CYCLES[label]
    phase = rng.uniform(0, 2 * np.pi)
    cx0 = rng.uniform(0.35 * w, 0.65 * w)
    cy = h - body_h / 2 - 0.05 * h
    amp = 0.12 * w
    brightness = rng.uniform(0.75, 0.95)
    background = rng.uniform(0.05, 0.15)

    frames = np.empty((t, h, w, 3), dtype=np.float32)
    for k in range(t):
        cx = cx0 + amp * np.sin(2 * np.pi * cycles * k / t + phase)
        mask = _draw_figure(h, w, cy, cx, body_h, body_w)
        frame = background + mask * (brightness - background)
        frames[k] = frame[..., None]
    frames += rng.uniform(-cfg.noise, cfg.noise, size=frames.shape).astype(np.float32)
    return np.clip(frames, 0.0, 1.0)


def make_clip_dataset(
    n_per_class: int, seed: int, cfg: SyntheticConfig = SyntheticConfig()
) -> tuple[np.ndarray, np.ndarray]:
    """Balanced clips + labels, deterministic in (seed, sample index)."""
    clips, labels = [], []
    for label in range(N_CLASSES):
        for i in range(n_per_class):
            clips.append(make_clip(label, seed * 100003 + i, cfg))
            labels.append(label)
    order = np.random.default_rng([seed, 7]).permutation(len(labels))
    return np.stack(clips)[order], np.asarray(labels, dtype=np.int64)[order]


def make_face(label: int, seed: int, cfg: SyntheticConfig = SyntheticConfig()) -> np.ndarray:
    """One (H, W, 3) face-like crop: disc radius and ring texture encode class."""
    rng = np.random.default_rng([seed, label, 2])
    h, w = cfg.face_size
    ys, xs = np.mgrid[0:h, 0:w]
    cy, cx = h / 2 + rng.uniform(-6, 6), w / 2 + rng.uniform(-6, 6)
    radius = (0.18 + 0.07 * label) * min(h, w)
    dist = np.sqrt((ys - cy) ** 2 + (xs - cx) ** 2)
    disc = (dist <= radius).astype(np.float32)
    rings = 0.5 + 0.5 * np.sin(dist / (2.0 + 1.5 * label))
    face = 0.1 + disc * (0.5 + 0.4 * rings)
    face = np.repeat(face[..., None], 3, axis=2).astype(np.float32)
    face += rng.uniform(-cfg.noise, cfg.noise, size=face.shape).astype(np.float32)
    return np.clip(face, 0.0, 1.0)


def make_face_dataset(
    n_per_class: int, seed: int, cfg: SyntheticConfig = SyntheticConfig()
) -> tuple[np.ndarray, np.ndarray]:
    faces, labels = [], []
    for label in range(N_CLASSES):
        for i in range(n_per_class):
            faces.append(make_face(label, seed * 100003 + i, cfg))
            labels.append(label)
    order = np.random.default_rng([seed, 11]).permutation(len(labels))
    return np.stack(faces)[order], np.asarray(labels, dtype=np.int64)[order]


class ClipArrayDataset:
    """Model-ready (clip, face, label) triples from in-memory arrays.

    Clips are normalized on access. Faces marked absent (or omitted
    entirely) stay the exact zero matrix; only present faces are
    normalized, preserving the no-face input contract.
    """

    def __init__(
        self,
        clips: np.ndarray,
        labels: np.ndarray,
        norm: NormalizationConfig = NormalizationConfig(),
        faces: np.ndarray | None = None,
        face_present: np.ndarray | None = None,
        face_size: tuple[int, int] = (288, 288),
    ):
        self.clips = clips
        self.labels = labels
        self.faces = faces
        self.face_present = face_present
        self.norm = norm
        self._zero_face = torch.zeros(3, *face_size)

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> tuple[torch.Tensor, torch.Tensor, int]:
        clip = torch.from_numpy(normalize_clip(self.clips[i], self.norm))
        if self.faces is None or (
            self.face_present is not None and not self.face_present[i]
        ):
            face = self._zero_face
        else:
            face = torch.from_numpy(
                normalize_clip(self.faces[i], self.norm)
            ).permute(2, 0, 1)
        return clip, face, int(self.labels[i])


class FaceArrayDataset:
    """(face, label) pairs for the face-classifier benchmark."""

    def __init__(self, faces: np.ndarray, labels: np.ndarray,
                 norm: NormalizationConfig = NormalizationConfig()):
        self.faces = faces
        self.labels = labels
        self.norm = norm

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> tuple[torch.Tensor, int]:
        face = torch.from_numpy(normalize_clip(self.faces[i], self.norm))
        return face.permute(2, 0, 1), int(self.labels[i])


def class_names() -> list[str]:
    return [c.name for c in AgeClass]
