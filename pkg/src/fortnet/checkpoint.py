"""Lossless parameter checkpoints (versioned npz container)."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor

FORMAT_VERSION = 1
_VERSION_KEY = "__checkpoint_version__"


class CheckpointError(RuntimeError):
    pass


def save_params(path, named_params) -> None:
    """Write named parameter tensors to `path` (npz, version-stamped)."""
    arrays = {_VERSION_KEY: np.asarray(FORMAT_VERSION)}
    for name, p in named_params:
        if name in arrays:
            raise CheckpointError(f"duplicate parameter name {name!r}")
        arrays[name] = p.data if isinstance(p, Tensor) else np.asarray(p)
    np.savez(path, **arrays)


def load_params(path) -> dict:
    """Read a checkpoint back into a {name: ndarray} dict."""
    with np.load(path) as archive:
        if _VERSION_KEY not in archive:
            raise CheckpointError(f"{path}: not a checkpoint (missing version key)")
        version = int(archive[_VERSION_KEY])
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        return {k: archive[k] for k in archive.files if k != _VERSION_KEY}


def restore_params(named_params, loaded: dict) -> None:
    """Copy loaded arrays into existing tensors, checking names and shapes."""
    for name, p in named_params:
        if name not in loaded:
            raise CheckpointError(f"checkpoint is missing parameter {name!r}")
        arr = loaded[name]
        if arr.shape != p.data.shape:
            raise CheckpointError(
                f"shape mismatch for {name!r}: checkpoint {arr.shape}, "
                f"model {p.data.shape}"
            )
        p.data[...] = arr
