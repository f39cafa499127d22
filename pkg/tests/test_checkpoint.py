import numpy as np
import pytest

from memrl.agent import TransformerAgent
from memrl.checkpoint import (
    FORMAT_VERSION,
    CheckpointError,
    load_checkpoint,
    read_header,
    save_checkpoint,
)
from memrl.encoder import EncoderConfig


def make_agent(seed=0) -> TransformerAgent:
    return TransformerAgent(
        EncoderConfig(d=16, n_layers=2, n_heads=2, d_ff=32, seq_len=5),
        obs_dim=1, action_dim=1, head_hidden=16, seed=seed,
    )


def test_roundtrip_bit_exact(tmp_path):
    agent = make_agent(seed=5)
    path = tmp_path / "ck.bin"
    save_checkpoint(path, agent, trainer_state={"steps": 123, "family": "velocity"})
    loaded, extras, state = load_checkpoint(path)
    assert state["steps"] == 123 and state["family"] == "velocity"
    assert extras == {}
    assert loaded.params.names() == agent.params.names()
    for name, p in agent.params.items():
        np.testing.assert_array_equal(p.data, loaded.params[name].data)
    assert loaded.config.to_dict() == agent.config.to_dict()


def test_extra_tensors_roundtrip(tmp_path):
    agent = make_agent()
    extras_in = {"adam.m.policy.w1": np.random.default_rng(0).normal(size=(16, 16))}
    path = tmp_path / "ck.bin"
    save_checkpoint(path, agent, extra_tensors=extras_in)
    _, extras, _ = load_checkpoint(path)
    np.testing.assert_array_equal(extras["adam.m.policy.w1"], extras_in["adam.m.policy.w1"])


def test_extra_name_collision_rejected(tmp_path):
    agent = make_agent()
    with pytest.raises(ValueError, match="collides"):
        save_checkpoint(tmp_path / "x.bin", agent, extra_tensors={"policy.w1": np.zeros(3)})


def test_corruption_detected(tmp_path):
    agent = make_agent()
    path = tmp_path / "ck.bin"
    save_checkpoint(path, agent)
    blob = bytearray(path.read_bytes())
    blob[-5] ^= 0xFF  # flip a payload byte
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(path)


def test_bad_magic_detected(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"garbage data that is not a checkpoint")
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_version_mismatch_is_explicit(tmp_path):
    agent = make_agent()
    path = tmp_path / "ck.bin"
    save_checkpoint(path, agent)
    raw = path.read_bytes()
    # bump the version inside the JSON header
    old = f'"format_version": {FORMAT_VERSION}'.encode()
    new = f'"format_version": {FORMAT_VERSION + 9}'.encode()
    assert old in raw
    path.write_bytes(raw.replace(old, new))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)


def test_header_is_self_describing(tmp_path):
    agent = make_agent()
    path = tmp_path / "ck.bin"
    save_checkpoint(path, agent)
    header = read_header(path)
    assert header["format_version"] == FORMAT_VERSION
    names = {e["name"] for e in header["tensors"]}
    assert "embed.w" in names and "policy.log_std" in names
    shapes = {e["name"]: tuple(e["shape"]) for e in header["tensors"]}
    assert shapes["embed.w"] == (5, 16)


def test_save_is_deterministic(tmp_path):
    agent = make_agent(seed=9)
    p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
    save_checkpoint(p1, agent, trainer_state={"steps": 1})
    save_checkpoint(p2, agent, trainer_state={"steps": 1})
    assert p1.read_bytes() == p2.read_bytes()
