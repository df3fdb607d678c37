"""Checkpoint directories: one raster per named tensor plus a JSON manifest."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..io import read_raster, write_raster
from .model import Any2AnyDiT, DitConfig

MANIFEST = "checkpoint.json"


class CheckpointError(ValueError):
    pass


def _file_name(name):
    return name.replace("/", "_") + ".raw"


def save_checkpoint(path, model, step=0, state=None, extra=None):
    """Write ``model`` (and optional optimizer ``state`` tensors) to ``path``.

    Tensors are stored as float64 rasters so reloads are bit-exact.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    groups = {"params": model.params, "state": state or {}}
    for group, tensors in groups.items():
        for name in tensors:
            arr = np.asarray(tensors[name], dtype=np.float64)
            fname = f"{group}.{_file_name(name)}"
            write_raster(path / fname, arr, precision=64)
            entries.append({"group": group, "name": name, "file": fname, "shape": list(arr.shape)})
    manifest = {
        "config": _config_json(model.cfg),
        "step": int(step),
        "tensors": entries,
        "extra": extra or {},
    }
    (path / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def _config_json(cfg):
    d = cfg.to_dict()
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def load_checkpoint(path):
    """Return ``(model, step, state, extra)``."""
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text())
    except OSError as err:
        raise CheckpointError(f"cannot read checkpoint manifest in {path}: {err}") from err
    cfg = DitConfig(**manifest["config"])
    groups = {"params": {}, "state": {}}
    for e in manifest["tensors"]:
        groups[e["group"]][e["name"]] = read_raster(path / e["file"], tuple(e["shape"]))
    model = Any2AnyDiT(cfg, groups["params"])
    return model, int(manifest["step"]), groups["state"], manifest.get("extra", {})
