"""The full two-stream model and its desk/paper presets."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .errors import ConfigError
from .face_backbone import FaceBackbone, FaceBackboneConfig, RunningNorm2d
from .fusion import ClassDistribution, FusionConfig, FusionHead
from .preprocessing import FaceInput, NormalizationConfig, normalize_clip, normalize_face
from .video_backbone import AttentionRecord, VideoBackbone, VideoBackboneConfig


@dataclass(frozen=True)
class ModelConfig:
    video: VideoBackboneConfig
    face: FaceBackboneConfig
    fusion: FusionConfig

    @classmethod
    def preset(cls, name: str) -> "ModelConfig":
        if name not in ("desk", "paper"):
            raise ConfigError(f"unknown preset {name!r}")
        return cls(
            video=VideoBackboneConfig.preset(name),
            face=FaceBackboneConfig.preset(name),
            fusion=FusionConfig.preset(name),
        )


@dataclass
class ModelOutput:
    logits: torch.Tensor
    probs: torch.Tensor
    main_feature: torch.Tensor
    support_feature: torch.Tensor
    fused: torch.Tensor
    fusion_attention: torch.Tensor
    video_attention: AttentionRecord | None = None


class AgeFormer(nn.Module):
    """Video stream + face stream + cross-attention fusion head."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.video_backbone = VideoBackbone(cfg.video)
        self.face_backbone = FaceBackbone(cfg.face)
        self.fusion_head = FusionHead(
            main_dim=cfg.video.embed_dim,
            support_dim=cfg.face.out_dim,
            cfg=cfg.fusion,
        )

    def forward(
        self, clip: torch.Tensor, face: torch.Tensor, record: bool = False
    ) -> ModelOutput:
        """clip: (B, T, H, W, 3); face: (B, 3, Hf, Wf), both normalized."""
        if record:
            main, video_rec = self.video_backbone(clip, record=True)
        else:
            main, video_rec = self.video_backbone(clip), None
        if self.cfg.fusion.kv_source == "spatial_tokens":
            support, support_tokens = self.face_backbone.forward_tokens(face)
            q, kv = self.fusion_head.project_features(main, support_tokens)
        else:
            support = self.face_backbone(face)
            q, kv = self.fusion_head.project_features(main, support)
        fused, attn = self.fusion_head.mha_fuse(q, kv)
        logits, probs = self.fusion_head.classify(q, fused)
        return ModelOutput(
            logits=logits,
            probs=probs,
            main_feature=main,
            support_feature=support,
            fused=fused,
            fusion_attention=attn,
            video_attention=video_rec,
        )


def zero_support_path_biases(model: AgeFormer) -> None:
    """Zero every shift along the supporting path, in place.

    Covers all face-backbone biases and normalization shifts (including the
    running means), the support projection and its layer norm, and the
    value/output projections of the fusion attention. With an absent-face
    zero input, the fused vector is then exactly zero and the prediction
    reduces to the main-stream path.
    """
    with torch.no_grad():
        for module in model.face_backbone.modules():
            if isinstance(module, (nn.Conv2d, nn.Linear)) and module.bias is not None:
                module.bias.zero_()
            if isinstance(module, RunningNorm2d):
                module.bias.zero_()
                module.running_mean.zero_()
        head = model.fusion_head
        head.support_proj.bias.zero_()
        head.support_norm.bias.zero_()
        head.v_proj.bias.zero_()
        head.out_proj.bias.zero_()


def prepare_inputs(
    clip_frames: np.ndarray,
    face: FaceInput,
    norm: NormalizationConfig,
    dtype: torch.dtype = torch.float32,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Normalize one clip + face and shape them as batch-1 model tensors."""
    clip = torch.from_numpy(normalize_clip(clip_frames, norm)).to(dtype)[None]
    face_np = normalize_face(face, norm)
    face_t = torch.from_numpy(face_np).to(dtype).permute(2, 0, 1)[None]
    return clip, face_t


def predict(
    model: AgeFormer,
    clip_frames: np.ndarray,
    face: FaceInput,
    norm: NormalizationConfig,
) -> ClassDistribution:
    """Single-sample inference returning the class distribution."""
    model.eval()
    dtype = next(model.parameters()).dtype
    clip, face_t = prepare_inputs(clip_frames, face, norm, dtype)
    with torch.no_grad():
        out = model(clip, face_t)
    return ClassDistribution(
        probs=out.probs[0].numpy().astype(np.float64),
        logits=out.logits[0].numpy().astype(np.float64),
    )
