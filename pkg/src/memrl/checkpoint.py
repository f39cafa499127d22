"""Self-describing binary checkpoints.

Layout: 8-byte magic, uint32 header length, UTF-8 JSON header, then the
concatenated parameter payload as little-endian float64. The header
carries the format version, encoder/agent config snapshots, a name ->
(shape, offset) index, optional trainer state (optimizer moments live in
the payload like any other tensor), and a SHA-256 of the payload so
corruption is caught before use.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .agent import TransformerAgent
from .autodiff import Parameters
from .encoder import EncoderConfig

MAGIC = b"MEMRLCKP"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    """Unreadable, corrupt, or version-incompatible checkpoint."""


def save_checkpoint(
    path: str | Path,
    agent: TransformerAgent,
    extra_tensors: dict[str, np.ndarray] | None = None,
    trainer_state: dict | None = None,
) -> None:
    tensors: dict[str, np.ndarray] = {k: v.data for k, v in agent.params.items()}
    for k, v in (extra_tensors or {}).items():
        if k in tensors:
            raise ValueError(f"extra tensor name collides with parameter: {k}")
        tensors[k] = np.asarray(v, dtype=np.float64)

    index = []
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)

    header = {
        "format_version": FORMAT_VERSION,
        "encoder_config": agent.config.to_dict(),
        "agent_config": {
            "obs_dim": agent.obs_dim,
            "action_dim": agent.action_dim,
            "head_hidden": agent.head_hidden,
            "value_scale": agent.value_scale,
        },
        "tensors": index,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "trainer_state": trainer_state or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(np.uint32(len(blob)).tobytes())
        f.write(blob)
        f.write(payload)


def read_header(path: str | Path) -> dict:
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
        (hlen,) = np.frombuffer(f.read(4), dtype=np.uint32)
        try:
            return json.loads(f.read(int(hlen)).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{path}: corrupt header") from exc


def load_checkpoint(path: str | Path) -> tuple[TransformerAgent, dict[str, np.ndarray], dict]:
    """Rebuild the agent; returns (agent, non-parameter tensors, trainer state)."""
    with open(path, "rb") as f:
        data = f.read()
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (hlen,) = np.frombuffer(data[len(MAGIC) : len(MAGIC) + 4], dtype=np.uint32)
    hstart = len(MAGIC) + 4
    try:
        header = json.loads(data[hstart : hstart + int(hlen)].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc

    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {version} unsupported (expected {FORMAT_VERSION}); "
            "no migration path exists"
        )
    payload = data[hstart + int(hlen) :]
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointError(f"{path}: payload checksum mismatch")

    tensors: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=start)
        tensors[entry["name"]] = arr.reshape(shape).astype(np.float64)

    enc_cfg = EncoderConfig.from_dict(header["encoder_config"])
    acfg = header["agent_config"]
    agent = TransformerAgent(
        enc_cfg,
        obs_dim=acfg["obs_dim"],
        action_dim=acfg["action_dim"],
        head_hidden=acfg["head_hidden"],
        value_scale=acfg.get("value_scale", 100.0),
    )
    extras: dict[str, np.ndarray] = {}
    for name, arr in tensors.items():
        if name in agent.params:
            if agent.params[name].data.shape != arr.shape:
                raise CheckpointError(
                    f"{path}: tensor {name} has shape {arr.shape}, "
                    f"expected {agent.params[name].data.shape}"
                )
            agent.params[name].data = arr
        else:
            extras[name] = arr
    agent.params.bump()
    missing = [n for n in agent.params.names() if n not in tensors]
    if missing:
        raise CheckpointError(f"{path}: missing parameters {missing}")
    return agent, extras, header.get("trainer_state", {})
