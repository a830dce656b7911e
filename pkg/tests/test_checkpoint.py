"""Checkpoint round-trips must be bit-exact and manifest-validated."""

import json

import numpy as np
import pytest

from prefixlab.checkpoint import load_checkpoint, save_checkpoint
from prefixlab.errors import InputError
from prefixlab.masks import LayerSchedule
from prefixlab.model import ModelConfig, PrefixSeq2Seq


def test_round_trip_is_bit_exact(tmp_path):
    cfg = ModelConfig(n_layers_enc=2, n_layers_dec=1, n_heads=2, d_model=8,
                      d_ff=16, vocab_size=11, max_seq_len=16)
    model = PrefixSeq2Seq(cfg, prefix_length=4,
                          schedule=LayerSchedule.top(1), seed=13)
    save_checkpoint(tmp_path / "ckpt", model, extra={"note": "unit"})
    loaded, manifest = load_checkpoint(tmp_path / "ckpt")
    assert manifest["extra"]["note"] == "unit"
    assert set(loaded.params) == set(model.params)
    for name, tensor in model.params.items():
        assert loaded.params[name].data.tobytes() == tensor.data.tobytes()


def test_manifest_lists_roles(tmp_path):
    cfg = ModelConfig(n_layers_enc=1, n_layers_dec=1, n_heads=2, d_model=8,
                      d_ff=16, vocab_size=7, max_seq_len=8)
    model = PrefixSeq2Seq(cfg, prefix_length=2, seed=0)
    save_checkpoint(tmp_path / "ckpt", model)
    manifest = json.loads((tmp_path / "ckpt" / "manifest.json").read_text())
    roles = {e["name"]: e["role"] for e in manifest["tensors"]}
    assert roles["prefix/enc/0/k"] == "prefix"
    assert roles["embed/tok"] == "backbone"
    assert all(r in ("backbone", "prefix") for r in roles.values())


def test_missing_manifest_rejected(tmp_path):
    with pytest.raises(InputError):
        load_checkpoint(tmp_path / "nothing")


def test_shape_mismatch_rejected(tmp_path):
    cfg = ModelConfig(n_layers_enc=1, n_layers_dec=1, n_heads=2, d_model=8,
                      d_ff=16, vocab_size=7, max_seq_len=8)
    model = PrefixSeq2Seq(cfg, prefix_length=2, seed=0)
    path = save_checkpoint(tmp_path / "ckpt", model)
    manifest = json.loads((path / "manifest.json").read_text())
    victim = manifest["tensors"][0]["file"]
    np.save(path / victim, np.zeros((3, 3)))
    with pytest.raises(InputError):
        load_checkpoint(path)
