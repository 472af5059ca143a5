"""Joint training loop, the face-classifier benchmark loop, checkpointing.

Both loops follow the same protocol: AdamW, per-epoch exponential learning
rate decay, cross-entropy loss, gradient clipping at global norm 1. All
randomness (init, batch order, dropout) derives from the config seed.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import model_config_to_dict, save_checkpoint
from .face_backbone import FaceBackbone, FaceBackboneConfig
from .model import AgeFormer, ModelConfig


class TrainingDivergedError(RuntimeError):
    """Raised when the loss goes non-finite; carries batch diagnostics."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 25
    batch_size: int = 16
    lr: float = 3e-5
    gamma: float = 0.9
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    seed: int = 0
    freeze_face: bool = False

    def __post_init__(self) -> None:
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")


@dataclass(frozen=True)
class FaceBenchConfig:
    epochs: int = 200
    batch_size: int = 512
    lr: float = 2e-3
    gamma: float = 0.9
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_acc: float | None
    lr: float


@dataclass
class TrainResult:
    model: nn.Module
    logs: list[EpochLog]
    steps: int
    best_path: str | None = None
    last_path: str | None = None
    best_val_acc: float | None = None


def lr_at_epoch(base_lr: float, gamma: float, epoch: int) -> float:
    """Learning rate in effect during the given epoch: lr * gamma^epoch."""
    return base_lr * gamma**epoch


class FaceClassifier(nn.Module):
    """Face trunk + linear head; the face-only benchmark model."""

    def __init__(self, cfg: FaceBackboneConfig, num_classes: int = 4):
        super().__init__()
        self.backbone = FaceBackbone(cfg)
        self.head = nn.Linear(cfg.out_dim, num_classes)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, face: torch.Tensor) -> torch.Tensor:
        return self.head(self.backbone(face))


def _epoch_batches(n: int, batch_size: int, seed: int, epoch: int, shuffle: bool):
    """Deterministic batch index lists; order derives from (seed, epoch)."""
    if shuffle:
        order = np.random.default_rng([seed, epoch]).permutation(n)
    else:
        order = np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def _grad_norms(model: nn.Module) -> dict[str, float]:
    norms: dict[str, float] = {}
    for child_name, child in model.named_children():
        total = 0.0
        for p in child.parameters():
            if p.grad is not None:
                total += float(p.grad.detach().pow(2).sum())
        norms[child_name] = total**0.5
    return norms


def _collate_joint(dataset, idx) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    items = [dataset[int(i)] for i in idx]
    clips = torch.stack([it[0] for it in items])
    faces = torch.stack([it[1] for it in items])
    labels = torch.tensor([it[2] for it in items], dtype=torch.long)
    return clips, faces, labels


def _collate_face(dataset, idx) -> tuple[torch.Tensor, torch.Tensor]:
    items = [dataset[int(i)] for i in idx]
    faces = torch.stack([it[0] for it in items])
    labels = torch.tensor([it[1] for it in items], dtype=torch.long)
    return faces, labels


def _run_loop(
    model: nn.Module,
    forward_loss,
    eval_acc,
    train_ds,
    val_ds,
    cfg,
    out_dir: str | None,
    configs: dict,
    max_steps: int | None,
) -> TrainResult:
    optimizer = torch.optim.AdamW(
        [p for p in model.parameters() if p.requires_grad],
        lr=cfg.lr,
        weight_decay=cfg.weight_decay,
    )
    scheduler = torch.optim.lr_scheduler.ExponentialLR(optimizer, gamma=cfg.gamma)

    logs: list[EpochLog] = []
    best_acc: float | None = None
    best_path = last_path = None
    log_path = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        best_path = os.path.join(out_dir, "best.ckpt")
        last_path = os.path.join(out_dir, "last.ckpt")
        log_path = os.path.join(out_dir, "epochs.jsonl")
        if os.path.exists(log_path):
            os.remove(log_path)

    steps = 0
    for epoch in range(cfg.epochs):
        epoch_lr = optimizer.param_groups[0]["lr"]
        model.train()
        losses = []
        for batch_id, idx in enumerate(
            _epoch_batches(len(train_ds), cfg.batch_size, cfg.seed, epoch, True)
        ):
            optimizer.zero_grad()
            loss = forward_loss(idx)
            if not torch.isfinite(loss):
                loss.backward()
                raise TrainingDivergedError(
                    f"non-finite loss {loss.item()} at epoch {epoch} batch {batch_id} "
                    f"(lr {epoch_lr:.3e}, grad norms {_grad_norms(model)})"
                )
            loss.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            optimizer.step()
            losses.append(float(loss.detach()))
            steps += 1
            if max_steps is not None and steps >= max_steps:
                break

        val_acc = eval_acc(val_ds) if val_ds is not None else None
        entry = EpochLog(
            epoch=epoch,
            train_loss=float(np.mean(losses)) if losses else float("nan"),
            val_acc=val_acc,
            lr=epoch_lr,
        )
        logs.append(entry)
        if log_path:
            with open(log_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(asdict(entry)) + "\n")
        if val_acc is not None and (best_acc is None or val_acc > best_acc):
            best_acc = val_acc
            if best_path:
                save_checkpoint(
                    best_path, dict(model.state_dict()), configs,
                    meta={"epoch": epoch, "val_acc": val_acc},
                )
        scheduler.step()
        if max_steps is not None and steps >= max_steps:
            break

    if last_path:
        save_checkpoint(
            last_path, dict(model.state_dict()), configs,
            meta={"epoch": logs[-1].epoch if logs else -1, "steps": steps},
        )
    return TrainResult(
        model=model, logs=logs, steps=steps,
        best_path=best_path if best_acc is not None else None,
        last_path=last_path, best_val_acc=best_acc,
    )


def evaluate_joint_accuracy(model: AgeFormer, dataset, batch_size: int = 16) -> float:
    model.eval()
    correct = 0
    with torch.no_grad():
        for idx in _epoch_batches(len(dataset), batch_size, 0, 0, False):
            clips, faces, labels = _collate_joint(dataset, idx)
            out = model(clips, faces)
            correct += int((out.logits.argmax(dim=1) == labels).sum())
    return correct / len(dataset)


def evaluate_face_accuracy(model: FaceClassifier, dataset, batch_size: int = 64) -> float:
    model.eval()
    correct = 0
    with torch.no_grad():
        for idx in _epoch_batches(len(dataset), batch_size, 0, 0, False):
            faces, labels = _collate_face(dataset, idx)
            logits = model(faces)
            correct += int((logits.argmax(dim=1) == labels).sum())
    return correct / len(dataset)


def train_ageformer(
    train_ds,
    val_ds,
    model_cfg: ModelConfig,
    cfg: TrainConfig = TrainConfig(),
    out_dir: str | None = None,
    max_steps: int | None = None,
    model: AgeFormer | None = None,
) -> TrainResult:
    """Train the two-stream model; fully reproducible given cfg.seed.

    Datasets yield (clip, face, label) with clip (T, H, W, 3) and face
    (3, H, W), already normalized. Saves best-val and last checkpoints
    when out_dir is given and writes one JSON log line per epoch.
    """
    torch.manual_seed(cfg.seed)
    if model is None:
        model = AgeFormer(model_cfg)
    if cfg.freeze_face:
        for p in model.face_backbone.parameters():
            p.requires_grad_(False)

    def forward_loss(idx):
        clips, faces, labels = _collate_joint(train_ds, idx)
        out = model(clips, faces)
        return F.cross_entropy(out.logits, labels)

    configs = {"model": model_config_to_dict(model_cfg), "train": asdict(cfg)}
    return _run_loop(
        model, forward_loss,
        lambda ds: evaluate_joint_accuracy(model, ds, cfg.batch_size),
        train_ds, val_ds, cfg, out_dir, configs, max_steps,
    )


def train_face_benchmark(
    train_ds,
    val_ds,
    face_cfg: FaceBackboneConfig,
    cfg: FaceBenchConfig = FaceBenchConfig(),
    out_dir: str | None = None,
    max_steps: int | None = None,
) -> TrainResult:
    """Face-only benchmark: face trunk + linear head, same protocol."""
    torch.manual_seed(cfg.seed)
    model = FaceClassifier(face_cfg)

    def forward_loss(idx):
        faces, labels = _collate_face(train_ds, idx)
        return F.cross_entropy(model(faces), labels)

    configs = {
        "model": {"face": model_config_to_dict(face_cfg)},
        "train": asdict(cfg),
    }
    return _run_loop(
        model, forward_loss,
        lambda ds: evaluate_face_accuracy(model, ds, min(cfg.batch_size, 64)),
        train_ds, val_ds, cfg, out_dir, configs, max_steps,
    )
