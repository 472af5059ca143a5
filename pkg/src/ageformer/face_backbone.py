"""The supporting stream: a convolutional trunk over 288x288 face crops.

The absent-face zero matrix goes through the same path as a real crop (no
branching on presence), so the downstream zero-face guarantees reduce to
homogeneity of this trunk at zero shift parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import ConfigError


@dataclass(frozen=True)
class FaceBackboneConfig:
    out_dim: int = 1408
    widths: tuple[int, ...] = (48, 96, 192, 288, 352)
    strides: tuple[int, ...] = (2, 2, 2, 2, 2)
    input_hw: tuple[int, int] = (288, 288)

    def __post_init__(self) -> None:
        if self.out_dim < 1:
            raise ConfigError("out_dim must be >= 1")
        if len(self.widths) != len(self.strides) or not self.widths:
            raise ConfigError("widths and strides must be non-empty and equal length")

    @classmethod
    def preset(cls, name: str) -> "FaceBackboneConfig":
        if name == "desk":
            return cls(out_dim=64, widths=(8, 16, 32), strides=(4, 4, 2))
        if name == "paper":
            return cls()
        raise ConfigError(f"unknown preset {name!r}")


class RunningNorm2d(nn.Module):
    """Per-channel affine normalization using running statistics.

    Unlike batch norm, the normalization itself always uses the running
    estimates, so outputs never depend on batch composition and
    single-sample inference is well-defined. The estimates update (without
    gradient) from batch statistics while training and are frozen in eval.
    """

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.register_buffer("running_mean", torch.zeros(channels))
        self.register_buffer("running_var", torch.ones(channels))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        mean = self.running_mean.to(x.dtype)
        var = self.running_var.to(x.dtype)
        out = (x - mean[None, :, None, None]) / torch.sqrt(
            var[None, :, None, None] + self.eps
        )
        out = out * self.weight[None, :, None, None] + self.bias[None, :, None, None]
        if self.training:
            with torch.no_grad():
                batch_mean = x.mean(dim=(0, 2, 3))
                batch_var = x.var(dim=(0, 2, 3), unbiased=False)
                self.running_mean.mul_(1 - self.momentum).add_(
                    self.momentum * batch_mean.to(self.running_mean.dtype)
                )
                self.running_var.mul_(1 - self.momentum).add_(
                    self.momentum * batch_var.to(self.running_var.dtype)
                )
        return out


class FaceBackbone(nn.Module):
    """Strided conv stages + global average pool + linear head."""

    def __init__(self, cfg: FaceBackboneConfig):
        super().__init__()
        self.cfg = cfg
        stages = []
        in_ch = 3
        for width, stride in zip(cfg.widths, cfg.strides):
            stages.append(nn.Conv2d(in_ch, width, kernel_size=3, stride=stride, padding=1))
            stages.append(RunningNorm2d(width))
            stages.append(nn.SiLU())
            in_ch = width
        self.trunk = nn.Sequential(*stages)
        self.head = nn.Linear(in_ch, cfg.out_dim)

    def forward_features(self, face: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) -> pre-pool feature map (B, C, h', w')."""
        if face.shape[1:] != (3, *self.cfg.input_hw):
            raise ConfigError(
                f"face shape {tuple(face.shape)} does not match config "
                f"(3, {self.cfg.input_hw[0]}, {self.cfg.input_hw[1]})"
            )
        return self.trunk(face.to(self.head.weight.dtype))

    def forward(self, face: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) -> (B, out_dim) feature vector."""
        fmap = self.forward_features(face)
        pooled = fmap.mean(dim=(2, 3))
        return self.head(pooled)

    def forward_tokens(self, face: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Feature vector plus the pre-pool map as a token sequence.

        Tokens are the head projection of each spatial position, shape
        (B, h'*w', out_dim); their mean equals the pooled feature up to the
        shared bias, since the head is affine.
        """
        fmap = self.forward_features(face)
        b, c, fh, fw = fmap.shape
        pooled = fmap.mean(dim=(2, 3))
        positions = fmap.permute(0, 2, 3, 1).reshape(b, fh * fw, c)
        return self.head(pooled), self.head(positions)
