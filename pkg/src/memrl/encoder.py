"""Causal transformer encoder over working-memory windows.

Each window slot is embedded with a bias-free linear map plus sinusoidal
position terms; L layers of causal multi-head self-attention and a
position-wise ReLU feed-forward block then refine the per-position
episodic memories. The full per-layer stack is exposed so downstream
analysis can inspect how representations converge across depth.

Depth-scaled initialization (use_tfixup) replaces layer normalization and
learning-rate warmup: all weights start Xavier (embeddings Gaussian with
variance d^-1/2), then value/output projections, feed-forward weights and
the embedding are scaled by 0.67 * L^-0.25.

Parameters are read-shared during rollouts; forward passes on separate
windows may run concurrently, updates are exclusive.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import rng as rngmod
from .autodiff import Parameters, Tensor


@dataclass
class EncoderConfig:
    d: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 256
    seq_len: int = 15
    use_tfixup: bool = True
    use_layer_norm: bool | None = None  # default: disabled exactly when use_tfixup

    def __post_init__(self):
        if self.use_layer_norm is None:
            self.use_layer_norm = not self.use_tfixup
        if self.d <= 0 or self.n_layers < 0 or self.seq_len < 1 or self.d_ff <= 0:
            raise ValueError(f"invalid encoder config: {self}")
        if self.n_heads < 1 or self.d % self.n_heads != 0:
            raise ValueError(f"d={self.d} not divisible by heads={self.n_heads}")
        if self.use_tfixup and self.use_layer_norm:
            raise ValueError("depth-scaled init requires layer norm to be disabled")

    @property
    def d_head(self) -> int:
        return self.d // self.n_heads

    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "d_ff": self.d_ff,
            "seq_len": self.seq_len,
            "use_tfixup": self.use_tfixup,
            "use_layer_norm": self.use_layer_norm,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)


@dataclass
class EpisodicMemoryStack:
    """Per-layer, per-position memories: memories[l, t] for l in 0..L.

    Level 0 holds the embedded working memories; level L feeds the policy.
    """

    memories: np.ndarray  # (L+1, N, d)

    @property
    def n_layers(self) -> int:
        return self.memories.shape[0] - 1

    @property
    def seq_len(self) -> int:
        return self.memories.shape[1]

    def final(self) -> np.ndarray:
        """Memory at the last layer and the query position."""
        return self.memories[-1, -1]


def positional_encoding(n: int, d: int) -> np.ndarray:
    """Sinusoidal positions: pe[p, 2i] = sin(p / 10000^(2i/d)), odd = cos."""
    pe = np.zeros((n, d))
    pos = np.arange(n)[:, None].astype(np.float64)
    idx = np.arange(0, d, 2).astype(np.float64)
    angles = pos / np.power(10000.0, idx / d)
    pe[:, 0::2] = np.sin(angles)
    pe[:, 1::2] = np.cos(angles[:, : d // 2])
    return pe


@dataclass
class ForwardResult:
    last: Tensor  # (B, N, d) final-layer sequence, on the autodiff graph
    stack: np.ndarray | None = None  # (B, L+1, N, d)
    attn: np.ndarray | None = None  # (B, L, H, N, N)


class TransformerEncoder:
    """Encoder stack plus its parameter set.

    Parameter names are hierarchical ("layer.2.mhsa.w_o") so checkpoints
    and diagnostics stay self-describing.
    """

    def __init__(
        self,
        config: EncoderConfig,
        input_dim: int,
        seed: int = 0,
        params: Parameters | None = None,
        init: bool = True,
        apply_scaling: bool | None = None,
    ):
        self.config = config
        self.input_dim = input_dim
        self.params = params if params is not None else Parameters()
        self.pos = positional_encoding(config.seq_len, config.d)
        self._tfixup_applied = False
        if init:
            self._init_params(seed)
            scale = config.use_tfixup if apply_scaling is None else apply_scaling
            if scale:
                self.tfixup_initialize()

    def _init_params(self, seed: int) -> None:
        cfg = self.config
        init_rng = rngmod.stream(seed, "init.encoder")
        if cfg.use_tfixup:
            embed = rngmod.gaussian_embed_init((self.input_dim, cfg.d), cfg.d, init_rng)
        else:
            embed = rngmod.xavier_init((self.input_dim, cfg.d), init_rng)
        self.params.add("embed.w", embed)
        for i in range(cfg.n_layers):
            for w in ("w_q", "w_k", "w_v", "w_o"):
                self.params.add(
                    f"layer.{i}.mhsa.{w}", rngmod.xavier_init((cfg.d, cfg.d), init_rng)
                )
            self.params.add(
                f"layer.{i}.ffn.w1", rngmod.xavier_init((cfg.d, cfg.d_ff), init_rng)
            )
            self.params.add(f"layer.{i}.ffn.b1", np.zeros(cfg.d_ff))
            self.params.add(
                f"layer.{i}.ffn.w2", rngmod.xavier_init((cfg.d_ff, cfg.d), init_rng)
            )
            self.params.add(f"layer.{i}.ffn.b2", np.zeros(cfg.d))
            if cfg.use_layer_norm:
                self.params.add(f"layer.{i}.ln1.gain", np.ones(cfg.d))
                self.params.add(f"layer.{i}.ln1.bias", np.zeros(cfg.d))
                self.params.add(f"layer.{i}.ln2.gain", np.ones(cfg.d))
                self.params.add(f"layer.{i}.ln2.bias", np.zeros(cfg.d))

    def tfixup_initialize(self) -> None:
        """Scale value/output projections, FFN weights and the embedding by
        0.67 * L^(-1/4). Query/key projections are left untouched."""
        if self._tfixup_applied:
            raise RuntimeError("depth-scaled initialization already applied")
        if self.config.use_layer_norm:
            raise RuntimeError("depth-scaled init requires layer norm disabled")
        factor = tfixup_scale(self.config.n_layers)
        self.params["embed.w"].data *= factor
        for i in range(self.config.n_layers):
            for name in ("mhsa.w_v", "mhsa.w_o", "ffn.w1", "ffn.w2"):
                self.params[f"layer.{i}.{name}"].data *= factor
        self.params.bump()
        self._tfixup_applied = True

    # -- forward -----------------------------------------------------------

    def embed(self, feats: np.ndarray) -> Tensor:
        """(B, N, F) features -> (B, N, d) embeddings with position terms."""
        B, N, F = feats.shape
        if F != self.input_dim:
            raise ad.DimensionError(
                f"window feature dim {F} does not match encoder input {self.input_dim}"
            )
        if N != self.config.seq_len:
            raise ad.DimensionError(
                f"window length {N} does not match configured length {self.config.seq_len}"
            )
        flat = Tensor(feats.reshape(B * N, F))
        x = ad.matmul(flat, self.params["embed.w"]).reshape(B, N, self.config.d)
        return ad.add(x, Tensor(self.pos))

    def mhsa(self, x: Tensor, layer: int, causal: bool = True):
        """Multi-head causal self-attention; returns (output, attn weights)."""
        cfg = self.config
        B, N, d = x.shape
        H, dh = cfg.n_heads, cfg.d_head
        flat = x.reshape(B * N, d)

        def heads(w: Tensor) -> Tensor:
            return ad.matmul(flat, w).reshape(B, N, H, dh).transpose(0, 2, 1, 3)

        q = heads(self.params[f"layer.{layer}.mhsa.w_q"])
        k = heads(self.params[f"layer.{layer}.mhsa.w_k"])
        v = heads(self.params[f"layer.{layer}.mhsa.w_v"])
        scores = ad.mul(ad.matmul(q, k.transpose(0, 1, 3, 2)), 1.0 / np.sqrt(dh))
        attn = ad.masked_softmax(scores, causal=causal)
        ctx = ad.matmul(attn, v).transpose(0, 2, 1, 3).reshape(B * N, d)
        out = ad.matmul(ctx, self.params[f"layer.{layer}.mhsa.w_o"]).reshape(B, N, d)
        return out, attn

    def encoder_layer(self, x: Tensor, layer: int, causal: bool = True):
        """Residual MHSA then residual position-wise FFN (post-norm optional)."""
        cfg = self.config
        attn_out, attn = self.mhsa(x, layer, causal=causal)
        y = ad.add(x, attn_out)
        if cfg.use_layer_norm:
            y = ad.layer_norm(
                y,
                self.params[f"layer.{layer}.ln1.gain"],
                self.params[f"layer.{layer}.ln1.bias"],
            )
        B, N, d = y.shape
        flat = y.reshape(B * N, d)
        h = ad.relu(ad.add(ad.matmul(flat, self.params[f"layer.{layer}.ffn.w1"]),
                           self.params[f"layer.{layer}.ffn.b1"]))
        f = ad.add(ad.matmul(h, self.params[f"layer.{layer}.ffn.w2"]),
                   self.params[f"layer.{layer}.ffn.b2"]).reshape(B, N, d)
        z = ad.add(y, f)
        if cfg.use_layer_norm:
            z = ad.layer_norm(
                z,
                self.params[f"layer.{layer}.ln2.gain"],
                self.params[f"layer.{layer}.ln2.bias"],
            )
        return z, attn

    def forward(
        self,
        feats: np.ndarray,
        want_stack: bool = False,
        want_attn: bool = False,
        causal: bool = True,
    ) -> ForwardResult:
        """Run the full stack on a batch of windows (B, N, F)."""
        cfg = self.config
        x = self.embed(feats)
        stack = None
        if want_stack:
            B, N, _ = feats.shape
            stack = np.empty((B, cfg.n_layers + 1, N, cfg.d))
            stack[:, 0] = x.data
        attn_all = None
        if want_attn:
            B, N, _ = feats.shape
            attn_all = np.empty((B, cfg.n_layers, cfg.n_heads, N, N))
        for i in range(cfg.n_layers):
            x, attn = self.encoder_layer(x, i, causal=causal)
            if want_stack:
                stack[:, i + 1] = x.data
            if want_attn:
                attn_all[:, i] = attn.data
        return ForwardResult(last=x, stack=stack, attn=attn_all)

    def memory_stack(self, feats: np.ndarray, want_attn: bool = False):
        """Inference-only stack for a single window (N, F)."""
        with ad.no_grad():
            res = self.forward(feats[None], want_stack=True, want_attn=want_attn)
        stack = EpisodicMemoryStack(res.stack[0])
        return (stack, res.attn[0]) if want_attn else stack


def tfixup_scale(n_layers: int) -> float:
    """Depth-dependent scale 0.67 * L^(-1/4)."""
    if n_layers < 1:
        raise ValueError("scaling needs at least one layer")
    return 0.67 * float(n_layers) ** -0.25


def consensus_bayes_risk_check(
    candidates: np.ndarray, weights: np.ndarray, atol: float = 1e-12
) -> tuple[float, float]:
    """Risk of the weighted-mean consensus vs. the best single candidate.

    candidates: (T, d) unit vectors; weights: (T,) probability vector.
    risk(x) = -sum_t w_t cos(candidate_t, x). Returns (risk of consensus,
    min over candidates); the consensus risk never exceeds the minimum.
    """
    candidates = np.asarray(candidates, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if candidates.ndim != 2 or weights.shape != (candidates.shape[0],):
        raise ad.DimensionError(
            f"need (T, d) candidates and (T,) weights, got {candidates.shape} / {weights.shape}"
        )
    norms = np.linalg.norm(candidates, axis=1)
    if not np.allclose(norms, 1.0, atol=1e-9):
        raise ValueError("candidates must be unit-norm")
    if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-9:
        raise ValueError("weights must be a probability vector")

    consensus = weights @ candidates
    cnorm = np.linalg.norm(consensus)
    if cnorm < atol:
        raise ValueError("degenerate input: consensus vector has zero norm")

    def risk(x: np.ndarray) -> float:
        xn = x / np.linalg.norm(x)
        return float(-(weights @ (candidates @ xn)))

    risk_consensus = risk(consensus)
    min_candidate = min(risk(c) for c in candidates)
    return risk_consensus, min_candidate
