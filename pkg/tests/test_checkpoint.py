import numpy as np
import pytest

from canf.checkpoint import (
    CheckpointFormatError,
    CheckpointIntegrityError,
    CheckpointVersionError,
    load_into_model,
    read_checkpoint,
    save_checkpoint,
)
from canf.config import ModelConfig
from canf.model import build_model
from canf.tensor import ShapeError


def randomized_model(seed=0, **kw):
    model = build_model(ModelConfig(**kw), seed=seed, max_timestep=100)
    rng = np.random.default_rng(seed + 100)
    for _, p in model.named_parameters():
        p.data[:] = rng.standard_normal(p.data.shape).astype(p.data.dtype)
    return model


def params_of(model):
    return {name: p.data.copy() for name, p in model.named_parameters()}


def test_roundtrip_is_bitwise(tmp_path):
    path = tmp_path / "m.canf"
    model = randomized_model()
    save_checkpoint(path, model, "snapshot-text")
    fresh = build_model(ModelConfig(), seed=9, max_timestep=100)
    before = params_of(model)
    config_text = load_into_model(path, fresh)
    assert config_text == "snapshot-text"
    for name, p in fresh.named_parameters():
        assert np.array_equal(p.data, before[name]), name


def test_config_snapshot_restored(tmp_path):
    from canf.config import parse_config, serialize_config
    path = tmp_path / "m.canf"
    cfg = parse_config(overrides=["depth=3", "width=32", "heads=2"])
    model = build_model(cfg.model, seed=0, max_timestep=100)
    save_checkpoint(path, model, serialize_config(cfg))
    text, _ = read_checkpoint(path)
    assert parse_config(text=text) == cfg


def test_corrupt_magic_rejected_without_partial_load(tmp_path):
    path = tmp_path / "m.canf"
    model = randomized_model()
    save_checkpoint(path, model, "")
    blob = bytearray(path.read_bytes())
    blob[:4] = b"XXXX"
    path.write_bytes(blob)
    fresh = build_model(ModelConfig(), seed=9, max_timestep=100)
    before = params_of(fresh)
    with pytest.raises(CheckpointFormatError, match="magic"):
        load_into_model(path, fresh)
    for name, p in fresh.named_parameters():
        assert np.array_equal(p.data, before[name])  # untouched


def test_version_mismatch_rejected(tmp_path):
    path = tmp_path / "m.canf"
    save_checkpoint(path, randomized_model(), "")
    blob = bytearray(path.read_bytes())
    blob[4:8] = (99).to_bytes(4, "little")
    path.write_bytes(blob)
    with pytest.raises(CheckpointVersionError, match="99"):
        read_checkpoint(path)


def test_truncated_payload_rejected(tmp_path):
    path = tmp_path / "m.canf"
    save_checkpoint(path, randomized_model(), "")
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) - 17])
    with pytest.raises(CheckpointIntegrityError):
        load_into_model(path, build_model(ModelConfig(), seed=9, max_timestep=100))


def test_mismatched_width_names_entry(tmp_path):
    path = tmp_path / "m.canf"
    save_checkpoint(path, randomized_model(), "")
    narrow = build_model(ModelConfig(width=32, heads=2), seed=9, max_timestep=100)
    with pytest.raises(ShapeError, match="patch_embed.weight"):
        load_into_model(path, narrow)


def test_missing_entries_reported(tmp_path):
    path = tmp_path / "m.canf"
    save_checkpoint(path, randomized_model(cond_aware_set=frozenset()), "")
    full = build_model(ModelConfig(), seed=9, max_timestep=100)  # has generators
    with pytest.raises(CheckpointIntegrityError, match="missing"):
        load_into_model(path, full)


def test_every_parameter_stored_exactly_once(tmp_path):
    path = tmp_path / "m.canf"
    model = randomized_model()  # shared out-proj generator attached to 4 blocks
    save_checkpoint(path, model, "")
    _, params = read_checkpoint(path)
    names = list(params)
    assert len(names) == len(set(names))
    assert len(names) == len(list(model.named_parameters()))
    shared = [n for n in names if "proj.adapter" in n]
    assert len(shared) == 1  # one shared generator entry, not four
