"""Fusion head: project both stream features to a shared width, fuse with
multi-head cross-attention (query from the main stream, key/value from the
supporting stream), add a skip connection, classify into the four classes.

With the default pooled supporting feature there is a single key/value
token, so every attention weight is exactly 1 and the fused vector does not
depend on the query at all. That degeneracy is intrinsic to this wiring and
is asserted by the test suite rather than hidden; set
kv_source="spatial_tokens" to attend over the face trunk's pre-pool
positions instead.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .datamodel import AgeClass
from .errors import ConfigError


@dataclass(frozen=True)
class FusionConfig:
    fused_dim: int = 512
    heads: int = 8
    dropout: float = 0.1
    num_classes: int = 4
    kv_source: str = "pooled"  # or "spatial_tokens"

    def __post_init__(self) -> None:
        if self.fused_dim % self.heads:
            raise ConfigError(
                f"fused_dim {self.fused_dim} not divisible by heads {self.heads}"
            )
        if self.kv_source not in ("pooled", "spatial_tokens"):
            raise ConfigError(f"unknown kv_source {self.kv_source!r}")

    @classmethod
    def preset(cls, name: str) -> "FusionConfig":
        if name == "desk":
            return cls(fused_dim=64, heads=4)
        if name == "paper":
            return cls()
        raise ConfigError(f"unknown preset {name!r}")


@dataclass(frozen=True)
class ClassDistribution:
    """Softmax class probabilities with their logits."""

    probs: np.ndarray
    logits: np.ndarray

    def validate(self) -> None:
        if self.probs.shape != self.logits.shape:
            raise ValueError("probs and logits must have the same shape")
        if np.any(self.probs < 0) or abs(float(self.probs.sum()) - 1.0) > 1e-6:
            raise ValueError("probs must be a distribution (nonnegative, sum 1)")

    @property
    def predicted(self) -> AgeClass:
        # np.argmax returns the first maximum: ties go to the lowest class.
        return AgeClass(int(np.argmax(self.probs)))


class FusionHead(nn.Module):
    def __init__(self, main_dim: int, support_dim: int, cfg: FusionConfig):
        super().__init__()
        self.cfg = cfg
        f = cfg.fused_dim
        self.main_proj = nn.Linear(main_dim, f)
        self.main_norm = nn.LayerNorm(f)
        self.support_proj = nn.Linear(support_dim, f)
        self.support_norm = nn.LayerNorm(f)
        self.drop = nn.Dropout(cfg.dropout)
        self.q_proj = nn.Linear(f, f)
        self.k_proj = nn.Linear(f, f)
        self.v_proj = nn.Linear(f, f)
        self.out_proj = nn.Linear(f, f)
        self.classifier = nn.Linear(f, cfg.num_classes)
        self._init_weights()

    def _init_weights(self) -> None:
        for module in (self.main_proj, self.support_proj, self.q_proj,
                       self.k_proj, self.v_proj, self.out_proj):
            nn.init.trunc_normal_(module.weight, std=0.02)
            nn.init.zeros_(module.bias)
        # Zero-initialized classifier: the untrained model is exactly the
        # uniform predictor (cross-entropy ln 4 on any input).
        nn.init.zeros_(self.classifier.weight)
        nn.init.zeros_(self.classifier.bias)

    def project_features(
        self, main: torch.Tensor, support: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Per stream: linear -> dropout -> layer norm, to the fused width.

        main is (B, main_dim); support is (B, support_dim) or a token
        sequence (B, n, support_dim). Returns q (B, F) and kv (B, n, F).
        """
        if main.shape[-1] != self.main_proj.in_features:
            raise ConfigError(
                f"main feature dim {main.shape[-1]} != {self.main_proj.in_features}"
            )
        if support.shape[-1] != self.support_proj.in_features:
            raise ConfigError(
                f"support feature dim {support.shape[-1]} != {self.support_proj.in_features}"
            )
        q = self.main_norm(self.drop(self.main_proj(main)))
        if support.dim() == 2:
            support = support[:, None, :]
        kv = self.support_norm(self.drop(self.support_proj(support)))
        return q, kv

    def mha_fuse(
        self, q: torch.Tensor, kv: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Scaled dot-product cross-attention, single query token.

        Returns the fused (B, F) vector and the attention weights
        (B, heads, n_kv). With one key/value token every weight is 1.
        """
        b, f = q.shape
        h = self.cfg.heads
        dh = f // h
        qh = self.q_proj(q).reshape(b, 1, h, dh).permute(0, 2, 1, 3)
        kh = self.k_proj(kv).reshape(b, -1, h, dh).permute(0, 2, 1, 3)
        vh = self.v_proj(kv).reshape(b, -1, h, dh).permute(0, 2, 1, 3)
        scores = (qh @ kh.transpose(-2, -1)) * dh ** -0.5  # (b,h,1,n)
        attn = scores.softmax(dim=-1)
        out = (attn @ vh).permute(0, 2, 1, 3).reshape(b, f)
        return self.out_proj(out), attn[:, :, 0, :]

    def classify(
        self, q: torch.Tensor, fused: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Skip-connected logits and probabilities: softmax(Linear(q + fused))."""
        logits = self.classifier(q + fused)
        return logits, logits.softmax(dim=-1)

    def forward(self, main: torch.Tensor, support: torch.Tensor):
        q, kv = self.project_features(main, support)
        fused, attn = self.mha_fuse(q, kv)
        logits, probs = self.classify(q, fused)
        return logits, probs, attn
