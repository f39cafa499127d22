"""Named deterministic random streams and weight initializers.

Every consumer (weight init, task sampling, action noise, minibatch
shuffling, ...) pulls its own Philox stream keyed by (root_seed, name), so
toggling one consumer on or off never shifts the draws of another.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def stream(root_seed: int, name: str) -> np.random.Generator:
    """Counter-based generator keyed by root seed and a stable name hash."""
    # built-in hash() is salted per process; sha256 keeps keys portable
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    name_key = int.from_bytes(digest[:8], "little")
    bitgen = np.random.Philox(key=[root_seed & _MASK64, name_key])
    return np.random.Generator(bitgen)


def xavier_init(shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    """Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out))."""
    if len(shape) < 1 or any(s <= 0 for s in shape):
        raise ValueError(f"xavier_init needs positive dimensions, got {shape}")
    if len(shape) == 1:
        fan_in = fan_out = shape[0]
    else:
        fan_in, fan_out = shape[0], shape[1]
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def gaussian_embed_init(
    shape: tuple[int, ...], d: int, rng: np.random.Generator
) -> np.ndarray:
    """Normal with variance d^(-1/2), i.e. std d^(-1/4), for embedding weights."""
    if d <= 0 or any(s <= 0 for s in shape):
        raise ValueError(f"gaussian_embed_init needs positive dims, got {shape}, d={d}")
    std = float(d) ** -0.25
    return rng.normal(0.0, std, size=shape)
