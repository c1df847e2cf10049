"""Single-file checkpoint archive shared by the GAN and recognizer models.

Each archive stores a format version, a model-kind tag, the architecture
config it was built with, and named parameter arrays.  Loading verifies
kind and config so weights can never be silently poured into the wrong
architecture.
"""

from __future__ import annotations

import os
import tempfile
from pathlib import Path

import torch

__all__ = ["CheckpointMismatch", "save_checkpoint", "load_checkpoint"]

FORMAT_VERSION = 1


class CheckpointMismatch(Exception):
    pass


def save_checkpoint(path: str | Path, kind: str, config: dict, state: dict, extra: dict | None = None) -> None:
    """Atomically write an archive (write to temp file, then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "version": FORMAT_VERSION,
        "kind": kind,
        "config": config,
        "state": state,
        "extra": extra or {},
    }
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            torch.save(payload, fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str | Path, expected_kind: str | None = None, expected_config: dict | None = None) -> dict:
    """Load an archive, failing loudly on version/kind/config mismatch."""
    payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    if not isinstance(payload, dict) or "version" not in payload:
        raise CheckpointMismatch(f"{path} is not a checkpoint archive")
    if payload["version"] != FORMAT_VERSION:
        raise CheckpointMismatch(f"{path}: format version {payload['version']} != {FORMAT_VERSION}")
    if expected_kind is not None and payload["kind"] != expected_kind:
        raise CheckpointMismatch(f"{path}: kind {payload['kind']!r} != expected {expected_kind!r}")
    if expected_config is not None and payload["config"] != expected_config:
        raise CheckpointMismatch(
            f"{path}: stored config does not match the requested architecture\n"
            f"stored:    {payload['config']}\nrequested: {expected_config}"
        )
    return payload
