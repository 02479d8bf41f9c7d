"""Checkpoint directory: ``manifest.json`` + ``weights.bin``.

The manifest lists every stored tensor in model order as
``{name, shape, dtype: "f32", byte_offset}``; the blob is the concatenation of
their little-endian float32 bytes.  Model config and run metadata ride along
in the manifest so a checkpoint can be evaluated on its own.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np

from .config import ModelConfig, from_dict
from .model import SegModel

FORMAT = "gcaresunet-checkpoint/1"
MANIFEST = "manifest.json"
BLOB = "weights.bin"


def state_arrays(model) -> list:
    return [(name, t.data) for name, t in model.named_tensors()]


def save_checkpoint(path, model: SegModel, meta: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name, arr in state_arrays(model):
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "f32", "byte_offset": offset})
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format": FORMAT,
        "blob": BLOB,
        "model": dataclasses.asdict(model.cfg),
        "meta": meta or {},
        "entries": entries,
    }
    (path / BLOB).write_bytes(b"".join(chunks))
    (path / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def read_manifest(path) -> dict:
    manifest = json.loads((Path(path) / MANIFEST).read_text())
    if manifest.get("format") != FORMAT:
        raise ValueError(f"{path}: unrecognized checkpoint format {manifest.get('format')!r}")
    return manifest


def load_into(model: SegModel, path) -> dict:
    """Overwrite ``model``'s tensors from the checkpoint at ``path``."""
    manifest = read_manifest(path)
    blob = (Path(path) / manifest["blob"]).read_bytes()
    tensors = dict(model.named_tensors())
    names = [e["name"] for e in manifest["entries"]]
    if names != list(tensors):
        missing = sorted(set(tensors) - set(names))
        extra = sorted(set(names) - set(tensors))
        raise ValueError(f"checkpoint does not match model: missing {missing[:5]}, unexpected {extra[:5]}")
    for e in manifest["entries"]:
        t = tensors[e["name"]]
        if e["dtype"] != "f32" or tuple(e["shape"]) != t.shape:
            raise ValueError(f"{e['name']}: stored {e['shape']} {e['dtype']} vs model {t.shape}")
        count = int(np.prod(e["shape"]))
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=e["byte_offset"])
        t.data = arr.reshape(e["shape"]).astype(np.float32)
    return manifest


def model_config_from_manifest(manifest: dict) -> ModelConfig:
    return from_dict(ModelConfig, manifest["model"])


def load_checkpoint(path) -> tuple:
    """Rebuild the model described by the manifest and fill in its weights."""
    manifest = read_manifest(path)
    model = SegModel(model_config_from_manifest(manifest))
    load_into(model, path)
    return model, manifest
