"""Checkpoint directory format: one .npy per tensor plus a JSON manifest.

The manifest lists every tensor with its name, shape, and role
(backbone|prefix) alongside the model configuration, so a checkpoint
reconstructs the model exactly; .npy storage round-trips float64 bits.
"""

from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .errors import InputError
from .masks import LayerSchedule, ScheduleMode
from .model import ModelConfig, PrefixSeq2Seq

FORMAT_VERSION = 1


def _schedule_text(schedule: LayerSchedule) -> str:
    if schedule.mode is ScheduleMode.ALL:
        return "all"
    return f"{schedule.mode.value}:{schedule.k}"


def save_checkpoint(directory, model: PrefixSeq2Seq,
                    extra: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    part = model.partition()
    tensors = []
    for i, (name, tensor) in enumerate(sorted(model.params.items())):
        fname = f"t{i:04d}.npy"
        np.save(directory / fname, tensor.data)
        tensors.append({
            "name": name,
            "shape": list(tensor.shape),
            "role": "prefix" if name in part.prefixes else "backbone",
            "file": fname,
        })
    manifest = {
        "version": FORMAT_VERSION,
        "model_config": asdict(model.config),
        "prefix_length": model.bank.prefix_length,
        "schedule": _schedule_text(model.schedule),
        "tensors": tensors,
        "extra": extra or {},
    }
    with open(directory / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return directory


def load_manifest(directory) -> dict:
    path = Path(directory) / "manifest.json"
    if not path.exists():
        raise InputError(f"no manifest at {path}")
    with open(path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("version") != FORMAT_VERSION:
        raise InputError(f"unsupported checkpoint version {manifest.get('version')}")
    return manifest


def load_checkpoint(directory) -> tuple[PrefixSeq2Seq, dict]:
    directory = Path(directory)
    manifest = load_manifest(directory)
    config = ModelConfig(**manifest["model_config"])
    model = PrefixSeq2Seq(config,
                          prefix_length=manifest["prefix_length"],
                          schedule=LayerSchedule.parse(manifest["schedule"]))
    listed = {entry["name"] for entry in manifest["tensors"]}
    if listed != set(model.params):
        missing = sorted(set(model.params) - listed)[:3]
        extra_names = sorted(listed - set(model.params))[:3]
        raise InputError(f"checkpoint/model tensor mismatch "
                         f"(missing {missing}, unexpected {extra_names})")
    for entry in manifest["tensors"]:
        data = np.load(directory / entry["file"])
        if list(data.shape) != entry["shape"]:
            raise InputError(f"tensor {entry['name']} has shape {data.shape}, "
                             f"manifest says {entry['shape']}")
        model.params[entry["name"]].data = np.ascontiguousarray(
            data, dtype=np.float64)
    return model, manifest


def copy_parameters(src: PrefixSeq2Seq, dst: PrefixSeq2Seq,
                    names: set[str] | frozenset[str] | None = None) -> None:
    """Copy parameter values by name (all shared names when None)."""
    picked = names if names is not None else set(src.params) & set(dst.params)
    for name in picked:
        if src.params[name].shape != dst.params[name].shape:
            raise InputError(f"parameter {name} shape mismatch")
        dst.params[name].data = src.params[name].data.copy()
