"""Single-file checkpoint container."""

from __future__ import annotations

from pathlib import Path

import torch

from ..config import ModelConfig

FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path, model, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": FORMAT_VERSION,
        "config": model.cfg.to_dict(),
        "state_dict": model.state_dict(),
        "extra": dict(extra or {}),
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path, map_location="cpu"):
    """Load a checkpoint, returning (model, extra).

    Raises CheckpointError on a missing file or a format-version mismatch.
    """
    from .core import SegmentationModel

    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location=map_location, weights_only=True)
    version = payload.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint format version {version!r} is not supported "
            f"(expected {FORMAT_VERSION}); re-export the checkpoint"
        )
    cfg_dict = dict(payload["config"])
    # All weights come from the checkpoint; never re-download backbone init.
    cfg_dict["pretrained_backbone"] = False
    cfg = ModelConfig.from_dict(cfg_dict)
    model = SegmentationModel(cfg)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload.get("extra", {})
