"""Checkpoint persistence: binary parameter blob + structured-text sidecar.

A checkpoint is ``<name>.pt`` (torch state dicts) plus ``<name>.json`` holding
the architecture config, schedule parameters, training step, dataset manifest
hash, and the sha256 of the blob. Loaders verify the recorded hash.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import torch


class CheckpointError(RuntimeError):
    pass


def _base(path) -> Path:
    p = Path(path)
    if p.suffix in (".pt", ".json"):
        p = p.with_suffix("")
    return p


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def manifest_hash(data_dir) -> str:
    manifest = Path(data_dir) / "manifest.json"
    if not manifest.exists():
        return "unknown"
    return file_sha256(manifest)


def save_checkpoint(path, blobs: dict, sidecar: dict) -> Path:
    base = _base(path)
    base.parent.mkdir(parents=True, exist_ok=True)
    blob_path = base.with_suffix(".pt")
    torch.save(blobs, blob_path)
    doc = dict(sidecar)
    doc["blob_sha256"] = file_sha256(blob_path)
    base.with_suffix(".json").write_text(json.dumps(doc, sort_keys=True, indent=1))
    return base


def load_checkpoint(path):
    base = _base(path)
    blob_path = base.with_suffix(".pt")
    side_path = base.with_suffix(".json")
    if not blob_path.exists() or not side_path.exists():
        raise CheckpointError(f"checkpoint {base} is missing its blob or sidecar")
    sidecar = json.loads(side_path.read_text())
    actual = file_sha256(blob_path)
    if sidecar.get("blob_sha256") != actual:
        raise CheckpointError(f"checkpoint {base}: blob hash mismatch")
    blobs = torch.load(blob_path, map_location="cpu", weights_only=True)
    return blobs, sidecar


def checkpoint_hash(path) -> str:
    base = _base(path)
    sidecar = json.loads(base.with_suffix(".json").read_text())
    return sidecar["blob_sha256"]
