"""Memory-based meta-RL: a causal transformer over recent transitions
builds per-layer episodic memories that condition a Gaussian policy,
meta-trained with PPO over task distributions."""

from .agent import TransformerAgent
from .backend import ACTIVE as BACKEND
from .encoder import EncoderConfig, TransformerEncoder, consensus_bayes_risk_check
from .envs import make_env, sample_tasks
from .memory import Transition, WorkingMemoryBuffer
from .training import PPOConfig, meta_test, meta_train, ood_eval

__all__ = [
    "TransformerAgent",
    "BACKEND",
    "EncoderConfig",
    "TransformerEncoder",
    "consensus_bayes_risk_check",
    "make_env",
    "sample_tasks",
    "Transition",
    "WorkingMemoryBuffer",
    "PPOConfig",
    "meta_test",
    "meta_train",
    "ood_eval",
]

__version__ = "0.1.0"
