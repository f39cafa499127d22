"""Inference-forward backend selection.

Rollout collection, evaluation and analysis only need forward passes, so
they go through whichever lane is available: the compiled extension when
it imported cleanly, otherwise the autodiff forward running under
no_grad. Set MEMRL_BACKEND=python (or =compiled) to force a lane; the
compiled lane falls back with an error if the extension is missing.

Training updates never come through here; PPO differentiates the numpy
tape directly.
"""

from __future__ import annotations

import os

import numpy as np

from . import autodiff as ad
from .encoder import TransformerEncoder

try:
    from . import _encoder_core
except ImportError:
    _encoder_core = None

_requested = os.environ.get("MEMRL_BACKEND", "auto")
if _requested not in ("auto", "python", "compiled"):
    raise RuntimeError(f"MEMRL_BACKEND must be auto|python|compiled, got {_requested!r}")
if _requested == "compiled" and _encoder_core is None:
    raise RuntimeError("MEMRL_BACKEND=compiled but the extension is not built")

ACTIVE = "python" if _requested == "python" or _encoder_core is None else "compiled"


def compiled_available() -> bool:
    return _encoder_core is not None


class _PackedWeights:
    """Per-layer weights stacked into contiguous blocks for the kernel."""

    def __init__(self, enc: TransformerEncoder):
        cfg = enc.config
        L, d, dff = cfg.n_layers, cfg.d, cfg.d_ff
        p = enc.params
        self.w_embed = np.ascontiguousarray(p["embed.w"].data)
        self.pos = np.ascontiguousarray(enc.pos)
        stack = lambda names, shape: (
            np.ascontiguousarray(
                np.stack([p[n].data for n in names]) if names else np.zeros((0,) + shape)
            )
        )
        layers = range(L)
        self.wq = stack([f"layer.{i}.mhsa.w_q" for i in layers], (d, d))
        self.wk = stack([f"layer.{i}.mhsa.w_k" for i in layers], (d, d))
        self.wv = stack([f"layer.{i}.mhsa.w_v" for i in layers], (d, d))
        self.wo = stack([f"layer.{i}.mhsa.w_o" for i in layers], (d, d))
        self.w1 = stack([f"layer.{i}.ffn.w1" for i in layers], (d, dff))
        self.b1 = stack([f"layer.{i}.ffn.b1" for i in layers], (dff,))
        self.w2 = stack([f"layer.{i}.ffn.w2" for i in layers], (dff, d))
        self.b2 = stack([f"layer.{i}.ffn.b2" for i in layers], (d,))
        if cfg.use_layer_norm:
            self.ln1_g = stack([f"layer.{i}.ln1.gain" for i in layers], (d,))
            self.ln1_b = stack([f"layer.{i}.ln1.bias" for i in layers], (d,))
            self.ln2_g = stack([f"layer.{i}.ln2.gain" for i in layers], (d,))
            self.ln2_b = stack([f"layer.{i}.ln2.bias" for i in layers], (d,))
        else:
            empty = np.zeros((0, d))
            self.ln1_g = self.ln1_b = self.ln2_g = self.ln2_b = empty
        # scratch buffers, one set per encoder (single-threaded forward)
        N = cfg.seq_len
        self.ws = tuple(
            np.empty(s) for s in [(N, d), (N, d), (N, d), (N, d), (N, N), (N, d), (N, dff)]
        )
        self.version = p.version


def _packed(enc: TransformerEncoder) -> _PackedWeights:
    cached = getattr(enc, "_packed_cache", None)
    if cached is None or cached.version != enc.params.version:
        cached = _PackedWeights(enc)
        enc._packed_cache = cached
    return cached


def forward_stack(
    enc: TransformerEncoder,
    feats: np.ndarray,
    want_attn: bool = False,
    lane: str | None = None,
) -> tuple[np.ndarray, np.ndarray | None]:
    """Batched inference forward: (B, N, F) -> stack (B, L+1, N, d)."""
    lane = lane or ACTIVE
    if lane == "python" or _encoder_core is None:
        with ad.no_grad():
            res = enc.forward(feats, want_stack=True, want_attn=want_attn)
        return res.stack, res.attn
    cfg = enc.config
    B, N, _ = feats.shape
    pk = _packed(enc)
    out = np.empty((B, cfg.n_layers + 1, N, cfg.d))
    if want_attn:
        attn = np.empty((B, cfg.n_layers, cfg.n_heads, N, N))
    else:
        attn = np.empty((1, 1, 1, 1, 1))
    _encoder_core.forward_stack(
        np.ascontiguousarray(feats),
        pk.w_embed, pk.pos,
        pk.wq, pk.wk, pk.wv, pk.wo,
        pk.w1, pk.b1, pk.w2, pk.b2,
        pk.ln1_g, pk.ln1_b, pk.ln2_g, pk.ln2_b,
        cfg.n_heads, cfg.use_layer_norm,
        *pk.ws,
        out, want_attn, attn,
    )
    return out, (attn if want_attn else None)
