"""Checkpoint directories: ``weights.safetensors`` plus a ``model.json`` sidecar."""

from __future__ import annotations

import json
from pathlib import Path

from safetensors.torch import load_file, save_file

from .errors import ValidationError
from .siamese import ModelCheckpoint, TowerSpec

WEIGHTS_FILE = "weights.safetensors"
SIDECAR_FILE = "model.json"


def save_checkpoint(checkpoint: ModelCheckpoint, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_file({k: v.contiguous() for k, v in checkpoint.weights.items()}, str(directory / WEIGHTS_FILE))
    sidecar = {
        "tower": checkpoint.tower_spec.kind,
        "embedding_dim": checkpoint.tower_spec.embedding_dim,
        "lineage": list(checkpoint.lineage),
        "seed": checkpoint.seed,
        "tower_spec": checkpoint.tower_spec.to_dict(),
    }
    (directory / SIDECAR_FILE).write_text(json.dumps(sidecar, indent=1))
    return directory


def load_checkpoint(directory: str | Path) -> ModelCheckpoint:
    directory = Path(directory)
    weights_path = directory / WEIGHTS_FILE
    sidecar_path = directory / SIDECAR_FILE
    for p in (weights_path, sidecar_path):
        if not p.is_file():
            raise ValidationError(f"checkpoint file missing: {p}")
    meta = json.loads(sidecar_path.read_text())
    spec_fields = meta.get("tower_spec") or {"kind": meta["tower"], "embedding_dim": meta["embedding_dim"]}
    spec = TowerSpec(**spec_fields)
    return ModelCheckpoint(
        tower_spec=spec,
        weights=load_file(str(weights_path)),
        lineage=tuple(meta.get("lineage", [])),
        seed=int(meta.get("seed", 0)),
    )
