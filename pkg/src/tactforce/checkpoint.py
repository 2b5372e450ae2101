"""Versioned on-disk checkpoints for fitted estimators."""

from __future__ import annotations

import io
import pickle
from pathlib import Path

import torch

CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(estimator, path, config: dict | None = None) -> Path:
    """Pickle a fitted estimator with its class name, version tag and config snapshot."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = {"version": CHECKPOINT_VERSION, "kind": type(estimator).__name__,
            "config": dict(config or {}), "estimator": pickle.dumps(estimator)}
    torch.save(blob, path)
    return path


def load_checkpoint(path, kind: str | None = None):
    """Return (estimator, config). ``kind`` guards against loading the wrong estimator type."""
    blob = torch.load(Path(path), weights_only=False)
    if not isinstance(blob, dict) or "version" not in blob:
        raise CheckpointError(f"{path} is not a checkpoint")
    if blob["version"] != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {blob['version']} != supported {CHECKPOINT_VERSION}")
    if kind is not None and blob["kind"] != kind:
        raise CheckpointError(f"expected a {kind} checkpoint, found {blob['kind']}")
    return pickle.load(io.BytesIO(blob["estimator"])), blob["config"]
