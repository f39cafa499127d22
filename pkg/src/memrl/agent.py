"""Gaussian policy and value heads on top of the final episodic memory.

Both heads share one encoder forward per step: the memory at the last
layer and query position feeds a small tanh MLP for the action mean and
another for the state value. The log-std is a single learnable vector
(state-independent), clamped to [-5, 2]. Actions are clipped to the env
bounds only at execution; log-probs always refer to the unclipped sample,
which leaves a small, accepted bias at the boundary.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import backend
from . import rng as rngmod
from .autodiff import Parameters, Tensor
from .encoder import EncoderConfig, EpisodicMemoryStack, TransformerEncoder
from .memory import WorkingMemoryBuffer, feature_dim

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
_LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class ActResult:
    action: np.ndarray  # unclipped sample; env clips at execution
    log_prob: float
    value: float
    memory: np.ndarray  # final episodic memory e[L, N-1]


class TransformerAgent:
    def __init__(
        self,
        encoder_config: EncoderConfig,
        obs_dim: int,
        action_dim: int,
        head_hidden: int = 64,
        init_log_std: float = 0.0,
        value_scale: float = 100.0,
        seed: int = 0,
    ):
        self.obs_dim = obs_dim
        self.action_dim = action_dim
        self.head_hidden = head_hidden
        # fixed output gain so the critic can express return-scale targets
        # without crawling its output weights up over thousands of updates
        self.value_scale = value_scale
        self.params = Parameters()
        self.encoder = TransformerEncoder(
            encoder_config, feature_dim(obs_dim, action_dim), seed=seed, params=self.params
        )
        r = rngmod.stream(seed, "init.heads")
        d = encoder_config.d
        self.params.add("policy.w1", rngmod.xavier_init((d, head_hidden), r))
        self.params.add("policy.b1", np.zeros(head_hidden))
        # near-zero mean head: the initial policy is exploration noise around
        # zero, which keeps the mean inside the action range while the critic
        # calibrates (a saturated constant mean gets no learning signal)
        self.params.add(
            "policy.w2", 0.01 * rngmod.xavier_init((head_hidden, action_dim), r)
        )
        self.params.add("policy.b2", np.zeros(action_dim))
        self.params.add("policy.log_std", np.full(action_dim, float(init_log_std)))
        self.params.add("value.w1", rngmod.xavier_init((d, head_hidden), r))
        self.params.add("value.b1", np.zeros(head_hidden))
        self.params.add("value.w2", np.zeros((head_hidden, 1)))
        self.params.add("value.b2", np.zeros(1))

    @property
    def config(self) -> EncoderConfig:
        return self.encoder.config

    # -- fast numpy heads (rollout path, no gradients) ----------------------

    def _sigma(self) -> np.ndarray:
        return np.exp(np.clip(self.params["policy.log_std"].data, LOG_STD_MIN, LOG_STD_MAX))

    def heads_np(self, memory: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(B, d) final memories -> (mean (B, A), value (B,))."""
        p = self.params
        h = np.tanh(memory @ p["policy.w1"].data + p["policy.b1"].data)
        mean = h @ p["policy.w2"].data + p["policy.b2"].data
        hv = np.tanh(memory @ p["value.w1"].data + p["value.b1"].data)
        value = (hv @ p["value.w2"].data + p["value.b2"].data)[..., 0] * self.value_scale
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(value))):
            raise ad.EvaluationError(
                "non-finite policy/value output; param norms: "
                + ", ".join(f"{k}={v:.3e}" for k, v in self.params.norms().items())
            )
        return mean, value

    def log_prob_np(self, actions: np.ndarray, means: np.ndarray) -> np.ndarray:
        sigma = self._sigma()
        z = (actions - means) / sigma
        log_std = np.clip(self.params["policy.log_std"].data, LOG_STD_MIN, LOG_STD_MAX)
        return -0.5 * (z * z).sum(axis=-1) - log_std.sum() - 0.5 * self.action_dim * _LOG_2PI

    def memories_np(self, feats: np.ndarray) -> np.ndarray:
        """Batched final memories for windows (B, N, F) via the active backend."""
        stack, _ = backend.forward_stack(self.encoder, feats)
        return stack[:, -1, -1, :]

    # -- acting --------------------------------------------------------------

    def act(
        self,
        buffer: WorkingMemoryBuffer,
        next_state: np.ndarray,
        rng: np.random.Generator,
    ) -> ActResult:
        """Sample an action from the policy conditioned on the current window."""
        feats = buffer.window_features(next_state)
        memory = self.memories_np(feats[None])[0]
        mean, value = self.heads_np(memory[None])
        noise = rng.standard_normal(self.action_dim)
        action = mean[0] + self._sigma() * noise
        log_prob = float(self.log_prob_np(action[None], mean)[0])
        return ActResult(action=action, log_prob=log_prob, value=float(value[0]), memory=memory)

    def act_deterministic(self, buffer: WorkingMemoryBuffer, next_state: np.ndarray) -> np.ndarray:
        """Mean action (greedy evaluation / probe targets); ignores rng state."""
        feats = buffer.window_features(next_state)
        memory = self.memories_np(feats[None])[0]
        mean, _ = self.heads_np(memory[None])
        return mean[0]

    def memory_stack(self, buffer: WorkingMemoryBuffer, next_state: np.ndarray) -> EpisodicMemoryStack:
        feats = buffer.window_features(next_state)
        stack, _ = backend.forward_stack(self.encoder, feats[None])
        return EpisodicMemoryStack(stack[0])

    # -- differentiable batch evaluation (PPO path) --------------------------

    def evaluate_actions(self, window_feats: np.ndarray, actions: np.ndarray):
        """Recompute (log_probs, values, entropy) for stored windows/actions.

        Pre-update this reproduces rollout-time log-probs (ratio 1). Returns
        autodiff tensors: log_probs (B,), values (B,), entropy scalar.
        """
        if window_feats.shape[0] != actions.shape[0]:
            raise ad.DimensionError(
                f"batch mismatch: {window_feats.shape[0]} windows vs "
                f"{actions.shape[0]} actions"
            )
        p = self.params
        res = self.encoder.forward(window_feats)
        e_last = ad.select_position(res.last, self.config.seq_len - 1)  # (B, d)
        h = ad.tanh(ad.add(ad.matmul(e_last, p["policy.w1"]), p["policy.b1"]))
        mean = ad.add(ad.matmul(h, p["policy.w2"]), p["policy.b2"])
        hv = ad.tanh(ad.add(ad.matmul(e_last, p["value.w1"]), p["value.b1"]))
        values = ad.mul(
            ad.add(ad.matmul(hv, p["value.w2"]), p["value.b2"]).reshape(-1),
            self.value_scale,
        )

        log_std = ad.clip(p["policy.log_std"], LOG_STD_MIN, LOG_STD_MAX)
        sigma = ad.texp(log_std)
        z = ad.div(ad.sub(Tensor(actions), mean), sigma)
        log_probs = ad.sub(
            ad.mul(ad.tsum(ad.mul(z, z), axis=-1), -0.5),
            ad.tsum(log_std) + 0.5 * self.action_dim * _LOG_2PI,
        )
        entropy = ad.tsum(log_std) + 0.5 * self.action_dim * (1.0 + _LOG_2PI)
        return log_probs, values, entropy
