"""Checkpoint container: named tensors + configs in one self-describing file.

Layout:
    bytes 0..7    magic b"AGFCKPT1"
    bytes 8..15   header length (uint64 little-endian)
    header        UTF-8 JSON: {"configs": {...}, "meta": {...},
                   "tensors": {name: {"dtype", "shape", "offset", "nbytes"}}}
    payload       concatenated raw little-endian tensor bytes

Offsets are relative to the start of the payload. Loading validates every
shape and the payload size, naming the offending tensor.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from typing import Any, Mapping

import numpy as np
import torch

from .errors import CheckpointError
from .face_backbone import FaceBackboneConfig
from .fusion import FusionConfig
from .model import ModelConfig
from .video_backbone import VideoBackboneConfig

MAGIC = b"AGFCKPT1"

_DTYPES = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8")}


def _config_to_dict(cfg: Any) -> Any:
    if dataclasses.is_dataclass(cfg):
        return _config_to_dict(dataclasses.asdict(cfg))
    if isinstance(cfg, dict):
        return {k: _config_to_dict(v) for k, v in cfg.items()}
    if isinstance(cfg, (tuple, list)):
        return [_config_to_dict(v) for v in cfg]
    return cfg


def model_config_to_dict(cfg: ModelConfig) -> dict:
    return _config_to_dict(cfg)


def model_config_from_dict(obj: Mapping) -> ModelConfig:
    def tupled(d: Mapping) -> dict:
        return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}

    try:
        return ModelConfig(
            video=VideoBackboneConfig(**tupled(obj["video"])),
            face=FaceBackboneConfig(**tupled(obj["face"])),
            fusion=FusionConfig(**tupled(obj["fusion"])),
        )
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"malformed model config in checkpoint: {exc}") from None


def save_checkpoint(
    path: str,
    tensors: Mapping[str, torch.Tensor],
    configs: Mapping[str, Any],
    meta: Mapping[str, Any] | None = None,
) -> None:
    index: dict[str, dict] = {}
    blobs: list[bytes] = []
    offset = 0
    for name, tensor in tensors.items():
        arr = tensor.detach().cpu().numpy()
        if arr.dtype == np.float64:
            dtype = "<f8"
        else:
            arr = arr.astype(np.float32)
            dtype = "<f4"
        raw = np.ascontiguousarray(arr.astype(_DTYPES[dtype])).tobytes()
        index[name] = {
            "dtype": dtype,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(raw),
        }
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"configs": dict(configs), "meta": dict(meta or {}), "tensors": index}
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path: str) -> tuple[dict[str, torch.Tensor], dict, dict]:
    """Returns (tensors, configs, meta). Fails loudly on corruption."""
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (magic {magic!r})")
        (header_len,) = struct.unpack("<Q", fh.read(8))
        try:
            header = json.loads(fh.read(header_len).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{path}: corrupt header ({exc})") from None
        payload = fh.read()

    tensors: dict[str, torch.Tensor] = {}
    for name, entry in header["tensors"].items():
        dtype = _DTYPES.get(entry["dtype"])
        if dtype is None:
            raise CheckpointError(f"{path}: tensor {name!r} has dtype {entry['dtype']!r}")
        start, nbytes = entry["offset"], entry["nbytes"]
        if start + nbytes > len(payload):
            raise CheckpointError(
                f"{path}: payload truncated at tensor {name!r} "
                f"(needs bytes up to {start + nbytes}, have {len(payload)})"
            )
        expected = int(np.prod(entry["shape"])) * dtype.itemsize if entry["shape"] else dtype.itemsize
        if nbytes != expected:
            raise CheckpointError(
                f"{path}: tensor {name!r} has {nbytes} bytes, expected {expected}"
            )
        arr = np.frombuffer(payload[start : start + nbytes], dtype=dtype).reshape(
            entry["shape"]
        )
        tensors[name] = torch.from_numpy(arr.copy())
    return tensors, header.get("configs", {}), header.get("meta", {})


def save_model(path: str, model: torch.nn.Module, configs: Mapping[str, Any],
               meta: Mapping[str, Any] | None = None) -> None:
    save_checkpoint(path, dict(model.state_dict()), configs, meta)


def load_into_model(path: str, model: torch.nn.Module,
                    expected_config: Mapping[str, Any] | None = None) -> dict:
    """Load tensors into the model, validating config and every shape."""
    tensors, configs, meta = load_checkpoint(path)
    if expected_config is not None and configs.get("model") != dict(expected_config):
        raise CheckpointError(
            "checkpoint model config does not match the target model; "
            f"checkpoint={configs.get('model')!r} target={dict(expected_config)!r}"
        )
    state = model.state_dict()
    missing = sorted(set(state) - set(tensors))
    if missing:
        raise CheckpointError(f"checkpoint is missing tensors: {missing[:5]}")
    for name, tensor in tensors.items():
        if name not in state:
            raise CheckpointError(f"checkpoint has unexpected tensor {name!r}")
        if tuple(tensor.shape) != tuple(state[name].shape):
            raise CheckpointError(
                f"shape mismatch for {name!r}: checkpoint {tuple(tensor.shape)}, "
                f"model {tuple(state[name].shape)}"
            )
    model.load_state_dict(
        {k: v.to(state[k].dtype) for k, v in tensors.items()}
    )
    return meta
