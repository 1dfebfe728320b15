"""Checkpoints: one flat GLTD vector plus a JSON manifest describing its slices."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import gltd
from .model import BackboneConfig, ModelState


def _entries(state: ModelState, extra: dict[str, dict[str, np.ndarray]] | None):
    groups = {"student": state.student, "teacher": state.teacher}
    groups.update(extra or {})
    for group, params in groups.items():
        for name, arr in params.items():
            yield f"{group}/{name}", np.asarray(arr, dtype=np.float64)
    yield "center", np.asarray(state.center, dtype=np.float64)


def save_checkpoint(path: str | os.PathLike, state: ModelState, meta: dict | None = None,
                    extra: dict[str, dict[str, np.ndarray]] | None = None) -> tuple[Path, Path]:
    """Write ``<path>.gltd`` and ``<path>.json``; returns both paths."""
    base = Path(path)
    base.parent.mkdir(parents=True, exist_ok=True)
    blobs, manifest, offset = [], [], 0
    for name, arr in _entries(state, extra):
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.ravel())
        offset += arr.size
    payload = gltd.dumps(np.concatenate(blobs) if blobs else np.zeros(0))
    cfg = asdict(state.config)
    doc = {
        "format": "glsd-checkpoint/1",
        "step": int(state.step),
        "model_config": cfg,
        "config_hash": state.config.digest(),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "tensors": manifest,
        "meta": meta or {},
    }
    data_path = base.with_suffix(".gltd")
    json_path = base.with_suffix(".json")
    data_path.write_bytes(payload)
    json_path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return data_path, json_path


def load_checkpoint(path: str | os.PathLike) -> tuple[ModelState, dict]:
    """Inverse of :func:`save_checkpoint`; returns ``(state, manifest)``.

    Tensor groups other than student/teacher (optimizer moments) come back in
    ``manifest["extra"]``.
    """
    base = Path(path)
    if base.suffix in (".gltd", ".json"):
        base = base.with_suffix("")
    doc = json.loads(base.with_suffix(".json").read_text())
    flat = gltd.load(base.with_suffix(".gltd"))
    cfg = BackboneConfig(**doc["model_config"])
    if cfg.digest() != doc["config_hash"]:
        raise ValueError("checkpoint config hash mismatch")
    groups: dict[str, dict[str, np.ndarray]] = {}
    center = None
    for entry in doc["tensors"]:
        size = int(np.prod(entry["shape"], dtype=np.int64))
        arr = flat[entry["offset"]:entry["offset"] + size].reshape(entry["shape"]).copy()
        if entry["name"] == "center":
            center = arr
            continue
        group, name = entry["name"].split("/", 1)
        groups.setdefault(group, {})[name] = arr
    state = ModelState(groups.pop("student"), groups.pop("teacher"), center, doc["step"], cfg)
    doc["extra"] = groups
    return state, doc
