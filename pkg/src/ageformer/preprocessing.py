"""Frame sampling, face-crop alignment, privacy augmentations, degradation.

All transforms here are stateless: randomness comes in through explicit
seeds, never ambient RNG state, so they are safe to call concurrently.
"""

from __future__ import annotations

import random
import struct
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy.ndimage import gaussian_filter

from .datamodel import Box, VideoRecord


class AlignmentError(ValueError):
    """Raised when a face crop cannot be aligned (degenerate landmarks etc.)."""


# Canonical eye positions in the aligned output, as fractions of (W, H).
CANONICAL_LEFT_EYE = (0.35, 0.40)
CANONICAL_RIGHT_EYE = (0.65, 0.40)

# A face annotation further than this many frames from the query frame is
# treated as unusable and the zero-matrix input is produced instead.
FACE_SEARCH_WINDOW = 8

FrameSource = Callable[[VideoRecord, int], np.ndarray]


@dataclass(frozen=True)
class SamplingConfig:
    """How clips are cut out of videos."""

    frames: int = 32
    stride: int = 4
    train_mode: str = "random_start"  # or "center_start"
    clip_resolution: tuple[int, int] = (224, 224)
    face_resolution: tuple[int, int] = (288, 288)

    def __post_init__(self) -> None:
        if self.frames < 1 or self.stride < 1:
            raise ValueError("frames and stride must be >= 1")
        if self.train_mode not in ("random_start", "center_start"):
            raise ValueError(f"unknown train_mode {self.train_mode!r}")


# The face-only image dataset uses the same sampler with T=10, stride 4.
FACE_DATASET_SAMPLING = SamplingConfig(frames=10, stride=4)


@dataclass(frozen=True)
class NormalizationConfig:
    """Channel-wise statistics applied to both streams after augmentation."""

    mean: tuple[float, float, float] = (0.45, 0.45, 0.45)
    std: tuple[float, float, float] = (0.225, 0.225, 0.225)


@dataclass(frozen=True)
class VideoClip:
    """A sampled T x H x W x 3 frame stack with its source frame indices."""

    frames: np.ndarray
    source_indices: tuple[int, ...]

    def validate(self) -> None:
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3:
            raise ValueError(f"clip must be T x H x W x 3, got {self.frames.shape}")
        if len(self.source_indices) != self.frames.shape[0]:
            raise ValueError("source_indices length must match frame count")
        if self.frames.min() < 0.0 or self.frames.max() > 1.0:
            raise ValueError("clip values must lie in [0, 1] before normalization")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.frames.shape


@dataclass(frozen=True)
class FaceInput:
    """An aligned face crop, or the all-zeros placeholder when absent."""

    pixels: np.ndarray
    present: bool

    def validate(self) -> None:
        if self.pixels.ndim != 3 or self.pixels.shape[-1] != 3:
            raise ValueError(f"face must be H x W x 3, got {self.pixels.shape}")
        if not self.present and np.any(self.pixels):
            raise ValueError("absent face must be exactly all zeros")


def zero_face(out_size: tuple[int, int] = (288, 288)) -> FaceInput:
    h, w = out_size
    return FaceInput(pixels=np.zeros((h, w, 3), dtype=np.float32), present=False)


# ---------------------------------------------------------------------------
# Frame index sampling.
# ---------------------------------------------------------------------------


def sample_frame_indices(n_frames: int, cfg: SamplingConfig, seed: int = 0) -> list[int]:
    """Pick cfg.frames indices from a video of n_frames frames.

    When the strided span (frames-1)*stride + 1 fits, indices are an
    arithmetic sequence from a random (or centered) start. Shorter videos
    are padded by cycling through consecutive frames: index k maps to
    k mod n_frames, so de-wrapped indices stay strictly increasing.
    """
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    span = (cfg.frames - 1) * cfg.stride + 1
    if n_frames >= span:
        max_start = n_frames - span
        if cfg.train_mode == "random_start":
            start = random.Random(seed).randint(0, max_start)
        else:
            start = max_start // 2
        return [start + k * cfg.stride for k in range(cfg.frames)]
    return [k % n_frames for k in range(cfg.frames)]


# ---------------------------------------------------------------------------
# Eye-landmark face alignment.
# ---------------------------------------------------------------------------


def eye_alignment_transform(
    eyes: Sequence[Sequence[float]], out_size: tuple[int, int]
) -> np.ndarray:
    """Similarity transform (2x3 matrix) mapping source eye points onto the
    canonical horizontal eye positions of an out_size crop.

    Determined exactly by the two correspondences: rotation + uniform scale
    + translation.
    """
    (lx, ly), (rx, ry) = eyes
    src = complex(rx - lx, ry - ly)
    if abs(src) < 2.0:
        raise AlignmentError(
            f"eye landmarks too close for alignment (distance {abs(src):.3f} px)"
        )
    h, w = out_size
    left = complex(CANONICAL_LEFT_EYE[0] * w, CANONICAL_LEFT_EYE[1] * h)
    right = complex(CANONICAL_RIGHT_EYE[0] * w, CANONICAL_RIGHT_EYE[1] * h)
    a = (right - left) / src
    t = left - a * complex(lx, ly)
    return np.array(
        [[a.real, -a.imag, t.real], [a.imag, a.real, t.imag]], dtype=np.float64
    )


def apply_affine_points(matrix: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Apply a 2x3 affine matrix to an array of (x, y) points."""
    pts = np.asarray(points, dtype=np.float64)
    return pts @ matrix[:, :2].T + matrix[:, 2]


def _invert_affine(matrix: np.ndarray) -> np.ndarray:
    lin = matrix[:, :2]
    inv = np.linalg.inv(lin)
    return np.hstack([inv, -inv @ matrix[:, 2:3]])


def warp_affine(
    image: np.ndarray, matrix: np.ndarray, out_size: tuple[int, int]
) -> np.ndarray:
    """Bilinear warp of an H x W x C image through a forward 2x3 affine.

    Output pixel (x, y) samples the source at the inverse-mapped location;
    samples outside the source are zero.
    """
    h_out, w_out = out_size
    inv = _invert_affine(matrix)
    xs, ys = np.meshgrid(np.arange(w_out), np.arange(h_out))
    src = apply_affine_points(inv, np.stack([xs.ravel(), ys.ravel()], axis=1))
    sx = src[:, 0].reshape(h_out, w_out)
    sy = src[:, 1].reshape(h_out, w_out)

    h_in, w_in = image.shape[:2]
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx = sx - x0
    fy = sy - y0

    def gather(yy, xx):
        valid = (yy >= 0) & (yy < h_in) & (xx >= 0) & (xx < w_in)
        out = np.zeros((h_out, w_out, image.shape[2]), dtype=np.float64)
        out[valid] = image[yy[valid], xx[valid]]
        return out, valid

    p00, _ = gather(y0, x0)
    p01, _ = gather(y0, x0 + 1)
    p10, _ = gather(y0 + 1, x0)
    p11, _ = gather(y0 + 1, x0 + 1)
    wx = fx[..., None]
    wy = fy[..., None]
    out = (
        p00 * (1 - wx) * (1 - wy)
        + p01 * wx * (1 - wy)
        + p10 * (1 - wx) * wy
        + p11 * wx * wy
    )
    return out.astype(np.float32)


def align_face_crop(
    frame: np.ndarray,
    box: Box,
    eyes: Sequence[Sequence[float]],
    out_size: tuple[int, int] = (288, 288),
) -> FaceInput:
    """Aligned face crop: the eye pair lands on canonical horizontal spots."""
    h_in, w_in = frame.shape[:2]
    x1, y1, x2, y2 = box
    if not (0 <= x1 < x2 <= w_in and 0 <= y1 < y2 <= h_in):
        raise AlignmentError(f"face box {box} outside frame {w_in}x{h_in}")
    for ex, ey in eyes:
        if not (0 <= ex <= w_in and 0 <= ey <= h_in):
            raise AlignmentError(f"eye landmark ({ex}, {ey}) outside frame")
    matrix = eye_alignment_transform(eyes, out_size)
    pixels = warp_affine(np.asarray(frame, dtype=np.float64), matrix, out_size)
    return FaceInput(pixels=pixels, present=True)


def face_input_or_zero(
    record: VideoRecord,
    frame_index: int,
    frame_source: FrameSource,
    out_size: tuple[int, int] = (288, 288),
    search_window: int = FACE_SEARCH_WINDOW,
) -> FaceInput:
    """Aligned crop from the nearest annotated frame, else the zero matrix.

    The nearest face annotation within +-search_window frames of
    frame_index is used (ties broken toward the earlier frame). Records
    without any usable annotation produce FaceInput(present=False) with
    exactly-zero pixels.
    """
    if record.face_boxes:
        best = min(record.face_boxes, key=lambda k: (abs(k - frame_index), k))
        if abs(best - frame_index) <= search_window:
            ann = record.face_boxes[best]
            frame = frame_source(record, best)
            return align_face_crop(frame, ann.box, ann.eyes, out_size)
    return zero_face(out_size)


# ---------------------------------------------------------------------------
# Privacy augmentations.
# ---------------------------------------------------------------------------

BLUR_SIGMA_FRACTION = 0.15  # sigma = fraction * max(box width, box height)
BLUR_TRUNCATE = 3.0


def _pixel_bounds(box: Box, h: int, w: int) -> tuple[int, int, int, int] | None:
    x1, y1, x2, y2 = box
    ix1 = max(0, int(np.floor(x1)))
    iy1 = max(0, int(np.floor(y1)))
    ix2 = min(w, int(np.ceil(x2)))
    iy2 = min(h, int(np.ceil(y2)))
    if ix1 >= ix2 or iy1 >= iy2:
        return None
    return ix1, iy1, ix2, iy2


def privacy_augment(
    clip: VideoClip,
    boxes: Mapping[int, Sequence[Box]],
    mode: str,
) -> VideoClip:
    """Blur or black out face boxes; pixels outside the boxes are untouched.

    boxes maps clip frame positions (0..T-1) to box lists. Blur uses a
    Gaussian whose sigma scales with the box size, computed inside the box
    region only, so the rest of the frame stays bit-identical.
    """
    if mode not in ("blur", "blackout"):
        raise ValueError(f"unknown privacy mode {mode!r}")
    frames = clip.frames.copy()
    t_max, h, w = frames.shape[:3]
    for t, frame_boxes in boxes.items():
        if not 0 <= t < t_max:
            raise ValueError(f"box frame position {t} outside clip of {t_max} frames")
        for box in frame_boxes:
            bounds = _pixel_bounds(box, h, w)
            if bounds is None:
                continue
            ix1, iy1, ix2, iy2 = bounds
            if mode == "blackout":
                frames[t, iy1:iy2, ix1:ix2] = 0.0
            else:
                sigma = BLUR_SIGMA_FRACTION * max(box[2] - box[0], box[3] - box[1])
                region = frames[t, iy1:iy2, ix1:ix2]
                frames[t, iy1:iy2, ix1:ix2] = gaussian_filter(
                    region,
                    sigma=(sigma, sigma, 0.0),
                    truncate=BLUR_TRUNCATE,
                    mode="reflect",
                )
    return VideoClip(frames=frames, source_indices=clip.source_indices)


# ---------------------------------------------------------------------------
# Resolution degradation for robustness sweeps.
# ---------------------------------------------------------------------------


def degrade_resolution(clip: VideoClip, low_res: tuple[int, int]) -> VideoClip:
    """Area-average down to low_res, then bilinear back to the native size.

    Simulates loss of spatial quality while keeping the tensor shape. The
    averaging reduction makes the (1, 1) extreme equal the per-frame mean.
    """
    t, h, w = clip.frames.shape[:3]
    lh, lw = low_res
    if not (1 <= lh <= h and 1 <= lw <= w):
        raise ValueError(f"low_res {low_res} must lie within the clip size {(h, w)}")
    if (lh, lw) == (h, w):
        return VideoClip(frames=clip.frames.copy(), source_indices=clip.source_indices)
    x = torch.from_numpy(np.ascontiguousarray(clip.frames)).permute(0, 3, 1, 2)
    x = F.adaptive_avg_pool2d(x, (lh, lw))
    x = F.interpolate(x, size=(h, w), mode="bilinear", align_corners=False)
    frames = x.permute(0, 2, 3, 1).contiguous().numpy().astype(np.float32)
    return VideoClip(frames=frames, source_indices=clip.source_indices)


def resize_frames(frames: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of a T x H x W x 3 stack (or single H x W x 3 frame)."""
    single = frames.ndim == 3
    stack = frames[None] if single else frames
    x = torch.from_numpy(np.ascontiguousarray(stack.astype(np.float32)))
    x = x.permute(0, 3, 1, 2)
    x = F.interpolate(x, size=out_hw, mode="bilinear", align_corners=False)
    out = x.permute(0, 2, 3, 1).contiguous().numpy()
    return out[0] if single else out


# ---------------------------------------------------------------------------
# Normalization (applied after augmentation, identical for both streams).
# ---------------------------------------------------------------------------


def normalize_clip(frames: np.ndarray, cfg: NormalizationConfig) -> np.ndarray:
    mean = np.asarray(cfg.mean, dtype=np.float32)
    std = np.asarray(cfg.std, dtype=np.float32)
    return ((frames - mean) / std).astype(np.float32)


def normalize_face(face: FaceInput, cfg: NormalizationConfig) -> np.ndarray:
    """Normalize a present face; the absent-face zero matrix passes through
    unchanged so the supporting stream really does see all zeros."""
    if not face.present:
        return face.pixels.astype(np.float32)
    return normalize_clip(face.pixels, cfg)


# ---------------------------------------------------------------------------
# Clip cache: one file per clip, shape header + raw little-endian float32.
# ---------------------------------------------------------------------------

CACHE_MAGIC = b"AGF1"


def save_array_cache(path: str, array: np.ndarray) -> None:
    """Layout: magic "AGF1", uint8 ndim, ndim x uint32-LE dims, f32-LE data."""
    arr = np.ascontiguousarray(array, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(struct.pack("<B", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def load_array_cache(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CACHE_MAGIC:
            raise ValueError(f"{path}: not a clip cache file (magic {magic!r})")
        (ndim,) = struct.unpack("<B", fh.read(1))
        shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
        expected = int(np.prod(shape)) * 4
        payload = fh.read()
    if len(payload) != expected:
        raise ValueError(
            f"{path}: payload has {len(payload)} bytes, expected {expected}"
        )
    return np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
