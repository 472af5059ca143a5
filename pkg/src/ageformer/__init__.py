"""Two-stream video age classification with divided space-time attention."""

from .datamodel import (
    AgeClass,
    DatasetManifest,
    FaceAnnotation,
    ManifestError,
    SplitSpec,
    StatsReport,
    VideoRecord,
    dataset_stats,
    load_manifest,
    stratified_split,
    write_manifest,
)
from .errors import CheckpointError, ConfigError
from .face_backbone import FaceBackbone, FaceBackboneConfig
from .fusion import ClassDistribution, FusionConfig, FusionHead
from .model import AgeFormer, ModelConfig, predict, zero_support_path_biases
from .preprocessing import (
    FaceInput,
    NormalizationConfig,
    SamplingConfig,
    VideoClip,
    align_face_crop,
    degrade_resolution,
    face_input_or_zero,
    privacy_augment,
    sample_frame_indices,
)
from .video_backbone import (
    AttentionRecord,
    VideoBackbone,
    VideoBackboneConfig,
    patchify,
    unpatchify,
)

__version__ = "0.1.0"

__all__ = [
    "AgeClass",
    "AgeFormer",
    "AttentionRecord",
    "CheckpointError",
    "ClassDistribution",
    "ConfigError",
    "DatasetManifest",
    "FaceAnnotation",
    "FaceBackbone",
    "FaceBackboneConfig",
    "FaceInput",
    "FusionConfig",
    "FusionHead",
    "ManifestError",
    "ModelConfig",
    "NormalizationConfig",
    "SamplingConfig",
    "SplitSpec",
    "StatsReport",
    "VideoBackbone",
    "VideoBackboneConfig",
    "VideoClip",
    "VideoRecord",
    "align_face_crop",
    "dataset_stats",
    "degrade_resolution",
    "face_input_or_zero",
    "load_manifest",
    "patchify",
    "predict",
    "privacy_augment",
    "sample_frame_indices",
    "stratified_split",
    "unpatchify",
    "write_manifest",
    "zero_support_path_biases",
]
