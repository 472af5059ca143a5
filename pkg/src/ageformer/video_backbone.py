"""The main stream: patch tokenization and divided space-time attention.

Tokens are ordered frame-major ("t-major"): row 0 is the class token and
row 1 + t*N + p holds spatial patch p of frame t. Every reshape in this
module, and the rollout indexing downstream, relies on that ordering.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .errors import ConfigError


@dataclass(frozen=True)
class VideoBackboneConfig:
    patch_size: int = 16
    embed_dim: int = 768
    depth: int = 12
    heads: int = 12
    frames: int = 32
    image_size: tuple[int, int] = (224, 224)
    mlp_ratio: float = 4.0

    def __post_init__(self) -> None:
        h, w = self.image_size
        if h % self.patch_size or w % self.patch_size:
            raise ConfigError(
                f"image size {self.image_size} not divisible by patch size {self.patch_size}"
            )
        if self.embed_dim % self.heads:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}"
            )

    @property
    def patch_grid(self) -> tuple[int, int]:
        return (self.image_size[0] // self.patch_size, self.image_size[1] // self.patch_size)

    @property
    def n_patches(self) -> int:
        gh, gw = self.patch_grid
        return gh * gw

    @property
    def n_tokens(self) -> int:
        return 1 + self.n_patches * self.frames

    @property
    def patch_dim(self) -> int:
        return 3 * self.patch_size * self.patch_size

    @classmethod
    def preset(cls, name: str) -> "VideoBackboneConfig":
        if name == "desk":
            return cls(patch_size=16, embed_dim=128, depth=4, heads=4,
                       frames=8, image_size=(64, 64))
        if name == "paper":
            return cls(patch_size=16, embed_dim=768, depth=12, heads=12,
                       frames=32, image_size=(224, 224))
        raise ConfigError(f"unknown preset {name!r}")


@dataclass
class LayerAttention:
    """Post-softmax weights of one block, as full token-level matrices.

    Shapes are (heads, S, S) with S = 1 + N*T. Rows are queries, columns
    keys; positions a token cannot attend to hold zeros. The class token
    does not attend in the temporal sublayer, so its temporal row is the
    identity row (weight 1 on itself).
    """

    temporal: np.ndarray
    spatial: np.ndarray


@dataclass
class AttentionRecord:
    layers: list[LayerAttention]
    n_patches: int
    frames: int
    patch_grid: tuple[int, int]


# ---------------------------------------------------------------------------
# Patch tokenization.
# ---------------------------------------------------------------------------


def patchify(clip: np.ndarray, cfg: VideoBackboneConfig) -> np.ndarray:
    """T x H x W x 3 clip -> (N*T) x 3P^2 patch vectors, t-major rows.

    Each row is the row-major flattening (rows, cols, channels) of one
    P x P x 3 patch. unpatchify inverts this exactly.
    """
    t, h, w, c = clip.shape
    p = cfg.patch_size
    if (t, h, w, c) != (cfg.frames, *cfg.image_size, 3):
        raise ConfigError(
            f"clip shape {clip.shape} does not match config "
            f"(T={cfg.frames}, HxW={cfg.image_size})"
        )
    gh, gw = h // p, w // p
    x = clip.reshape(t, gh, p, gw, p, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)  # (t, gh, gw, p, p, c)
    return x.reshape(t * gh * gw, p * p * c)


def unpatchify(tokens: np.ndarray, cfg: VideoBackboneConfig) -> np.ndarray:
    """Exact inverse of patchify."""
    p = cfg.patch_size
    gh, gw = cfg.patch_grid
    t = cfg.frames
    if tokens.shape != (t * gh * gw, 3 * p * p):
        raise ConfigError(f"token matrix shape {tokens.shape} does not match config")
    x = tokens.reshape(t, gh, gw, p, p, 3)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(t, gh * p, gw * p, 3)


def _patchify_torch(clip: torch.Tensor, cfg: VideoBackboneConfig) -> torch.Tensor:
    """(B, T, H, W, 3) -> (B, N*T, 3P^2); same ordering as patchify()."""
    b, t, h, w, c = clip.shape
    p = cfg.patch_size
    gh, gw = h // p, w // p
    x = clip.reshape(b, t, gh, p, gw, p, c)
    x = x.permute(0, 1, 2, 4, 3, 5, 6)
    return x.reshape(b, t * gh * gw, p * p * c)


# ---------------------------------------------------------------------------
# Attention sublayers.
# ---------------------------------------------------------------------------


def _split_heads(x: torch.Tensor, heads: int) -> torch.Tensor:
    b, s, d = x.shape
    return x.reshape(b, s, heads, d // heads)


class TemporalAttention(nn.Module):
    """Each spatial location attends across its T time copies plus the class
    token (as key/value). The class token itself passes through unchanged."""

    def __init__(self, dim: int, heads: int, frames: int, n_patches: int):
        super().__init__()
        self.heads = heads
        self.frames = frames
        self.n_patches = n_patches
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, record: bool = False):
        b, s, d = x.shape
        t, n, h = self.frames, self.n_patches, self.heads
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        q, k, v = (_split_heads(y, h) for y in (q, k, v))

        pq = q[:, 1:].reshape(b, t, n, h, -1).permute(0, 2, 3, 1, 4)  # (b,n,h,t,d)
        pk = k[:, 1:].reshape(b, t, n, h, -1).permute(0, 2, 3, 1, 4)
        pv = v[:, 1:].reshape(b, t, n, h, -1).permute(0, 2, 3, 1, 4)
        ck = k[:, :1].reshape(b, 1, h, 1, -1).expand(b, n, h, 1, pk.shape[-1])
        cv = v[:, :1].reshape(b, 1, h, 1, -1).expand(b, n, h, 1, pv.shape[-1])
        keys = torch.cat([ck, pk], dim=3)       # class key first
        vals = torch.cat([cv, pv], dim=3)

        scores = (pq @ keys.transpose(-2, -1)) * self.scale  # (b,n,h,t,t+1)
        attn = scores.softmax(dim=-1)
        out = attn @ vals                                     # (b,n,h,t,d)
        out = out.permute(0, 3, 1, 2, 4).reshape(b, t * n, d)
        out = self.proj(out)
        out = torch.cat([x.new_zeros(b, 1, d), out], dim=1)

        matrix = self._full_matrix(attn) if record else None
        return out, matrix

    def _full_matrix(self, attn: torch.Tensor) -> np.ndarray:
        b, n, h, t, _ = attn.shape
        if b != 1:
            raise ValueError("attention recording requires batch size 1")
        s = 1 + n * t
        w = attn[0].detach().to(torch.float64).cpu().numpy()  # (n,h,t,t+1)
        full = np.zeros((h, s, s), dtype=np.float64)
        full[:, 0, 0] = 1.0
        for p in range(n):
            rows = 1 + np.arange(t) * n + p
            full[:, rows, 0] = w[p, :, :, 0]
            full[:, rows[:, None], rows[None, :]] = w[p, :, :, 1:]
        return full


class SpatialAttention(nn.Module):
    """Patches attend within their frame (plus the class token as key/value);
    the class-token query attends once over every token."""

    def __init__(self, dim: int, heads: int, frames: int, n_patches: int):
        super().__init__()
        self.heads = heads
        self.frames = frames
        self.n_patches = n_patches
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, record: bool = False):
        b, s, d = x.shape
        t, n, h = self.frames, self.n_patches, self.heads
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        q, k, v = (_split_heads(y, h) for y in (q, k, v))

        pq = q[:, 1:].reshape(b, t, n, h, -1).permute(0, 1, 3, 2, 4)  # (b,t,h,n,d)
        pk = k[:, 1:].reshape(b, t, n, h, -1).permute(0, 1, 3, 2, 4)
        pv = v[:, 1:].reshape(b, t, n, h, -1).permute(0, 1, 3, 2, 4)
        ck = k[:, :1].reshape(b, 1, h, 1, -1).expand(b, t, h, 1, pk.shape[-1])
        cv = v[:, :1].reshape(b, 1, h, 1, -1).expand(b, t, h, 1, pv.shape[-1])
        keys = torch.cat([ck, pk], dim=3)       # class key first
        vals = torch.cat([cv, pv], dim=3)

        scores = (pq @ keys.transpose(-2, -1)) * self.scale  # (b,t,h,n,n+1)
        attn_p = scores.softmax(dim=-1)
        out_p = attn_p @ vals                                 # (b,t,h,n,d)
        out_p = out_p.permute(0, 1, 3, 2, 4).reshape(b, t * n, d)

        # Class-token query: one pass over all tokens (itself + every patch).
        cq = q[:, :1].permute(0, 2, 1, 3)                     # (b,h,1,d)
        ka = k.permute(0, 2, 1, 3)                            # (b,h,s,d)
        va = v.permute(0, 2, 1, 3)
        cls_scores = (cq @ ka.transpose(-2, -1)) * self.scale  # (b,h,1,s)
        attn_c = cls_scores.softmax(dim=-1)
        out_c = (attn_c @ va).permute(0, 2, 1, 3).reshape(b, 1, d)

        out = self.proj(torch.cat([out_c, out_p], dim=1))
        matrix = self._full_matrix(attn_p, attn_c) if record else None
        return out, matrix

    def _full_matrix(self, attn_p: torch.Tensor, attn_c: torch.Tensor) -> np.ndarray:
        b, t, h, n, _ = attn_p.shape
        if b != 1:
            raise ValueError("attention recording requires batch size 1")
        s = 1 + n * t
        wp = attn_p[0].detach().to(torch.float64).cpu().numpy()  # (t,h,n,n+1)
        wc = attn_c[0].detach().to(torch.float64).cpu().numpy()  # (h,1,s)
        full = np.zeros((h, s, s), dtype=np.float64)
        full[:, 0, :] = wc[:, 0, :]
        for fr in range(t):
            rows = 1 + fr * n + np.arange(n)
            full[:, rows, 0] = wp[fr, :, :, 0]
            full[:, rows[:, None], rows[None, :]] = wp[fr, :, :, 1:]
        return full


class FeedForward(nn.Module):
    def __init__(self, dim: int, mlp_ratio: float):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(x)))


class DividedBlock(nn.Module):
    """One backbone block: temporal attention, spatial attention, MLP, each
    pre-normalized with a residual connection."""

    def __init__(self, cfg: VideoBackboneConfig):
        super().__init__()
        d = cfg.embed_dim
        self.norm_t = nn.LayerNorm(d)
        self.attn_t = TemporalAttention(d, cfg.heads, cfg.frames, cfg.n_patches)
        self.norm_s = nn.LayerNorm(d)
        self.attn_s = SpatialAttention(d, cfg.heads, cfg.frames, cfg.n_patches)
        self.norm_mlp = nn.LayerNorm(d)
        self.mlp = FeedForward(d, cfg.mlp_ratio)

    def temporal(self, x: torch.Tensor, record: bool = False):
        out, matrix = self.attn_t(self.norm_t(x), record)
        return x + out, matrix

    def spatial(self, x: torch.Tensor, record: bool = False):
        out, matrix = self.attn_s(self.norm_s(x), record)
        return x + out, matrix

    def feedforward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.mlp(self.norm_mlp(x))

    def forward(self, x: torch.Tensor, record: bool = False):
        x, mat_t = self.temporal(x, record)
        x, mat_s = self.spatial(x, record)
        x = self.feedforward(x)
        layer = LayerAttention(temporal=mat_t, spatial=mat_s) if record else None
        return x, layer


class VideoBackbone(nn.Module):
    """Patch embedding + class token + positional tables + divided blocks.

    The clip feature is the class-token row after the final normalization.
    """

    def __init__(self, cfg: VideoBackboneConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Linear(cfg.patch_dim, cfg.embed_dim)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, cfg.embed_dim))
        self.pos_spatial = nn.Parameter(torch.zeros(cfg.n_patches + 1, cfg.embed_dim))
        self.pos_temporal = nn.Parameter(torch.zeros(cfg.frames, cfg.embed_dim))
        self.blocks = nn.ModuleList(DividedBlock(cfg) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(cfg.embed_dim)
        self._init_weights()

    def _init_weights(self) -> None:
        for module in self.modules():
            if isinstance(module, nn.Linear):
                nn.init.trunc_normal_(module.weight, std=0.02)
                nn.init.zeros_(module.bias)
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        nn.init.trunc_normal_(self.pos_spatial, std=0.02)
        nn.init.trunc_normal_(self.pos_temporal, std=0.02)

    def embed_clip(self, clip: torch.Tensor) -> torch.Tensor:
        """(B, T, H, W, 3) -> (B, S, D) tokens with class token and positions."""
        cfg = self.cfg
        if clip.shape[1:] != (cfg.frames, *cfg.image_size, 3):
            raise ConfigError(
                f"clip shape {tuple(clip.shape)} does not match config "
                f"(T={cfg.frames}, HxW={cfg.image_size})"
            )
        patches = _patchify_torch(clip.to(self.embed.weight.dtype), cfg)
        tokens = self.embed(patches)
        pos = (self.pos_temporal[:, None, :] + self.pos_spatial[None, 1:, :]).reshape(
            cfg.frames * cfg.n_patches, cfg.embed_dim
        )
        tokens = tokens + pos
        cls = (self.cls_token + self.pos_spatial[0]).expand(clip.shape[0], 1, -1)
        return torch.cat([cls, tokens], dim=1)

    def forward_tokens(self, tokens: torch.Tensor, record: bool = False):
        layers: list[LayerAttention] = []
        for block in self.blocks:
            tokens, layer = block(tokens, record)
            if record:
                layers.append(layer)
        tokens = self.norm(tokens)
        rec = (
            AttentionRecord(
                layers=layers,
                n_patches=self.cfg.n_patches,
                frames=self.cfg.frames,
                patch_grid=self.cfg.patch_grid,
            )
            if record
            else None
        )
        return tokens, rec

    def forward(self, clip: torch.Tensor, record: bool = False):
        """Returns the (B, D) clip feature; with record=True (batch size 1)
        also the AttentionRecord of every layer/head/sublayer."""
        tokens = self.embed_clip(clip)
        tokens, rec = self.forward_tokens(tokens, record)
        feature = tokens[:, 0]
        if record:
            return feature, rec
        return feature
