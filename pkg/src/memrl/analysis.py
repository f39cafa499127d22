"""Post-hoc analyses on trained checkpoints.

- memory refinement: how close each layer's query-position memory already
  is to the final layer's (one minus cosine similarity), collected across
  tasks and episodes;
- per-layer linear probes predicting the greedy action from the memory at
  that layer (ridge regression, held-out task split);
- PCA export of raw working-memory embeddings for latent visualization;
- ablation grids re-running meta-training along one axis at a time.

Everything here is read-only over the checkpoint and a pure function of
(checkpoint, seed); grid settings are embarrassingly parallel. Trend
claims are checked as rank correlations, not per-layer monotonicity.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import stats as sstats

from . import rng as rngmod
from .agent import TransformerAgent
from .encoder import EncoderConfig, EpisodicMemoryStack
from .envs import make_env, run_episode, sample_tasks
from .memory import WorkingMemoryBuffer
from .training import NumericFailure, PPOConfig, TrainResult, meta_train


def representation_error(stack: EpisodicMemoryStack) -> np.ndarray:
    """err[l-1] = 1 - cos(memory[l, N-1], memory[L, N-1]) for l = 1..L."""
    L = stack.n_layers
    if L < 2:
        raise ValueError("refinement needs at least two layers")
    final = stack.memories[L, -1]
    fnorm = np.linalg.norm(final)
    errs = np.zeros(L)
    for l in range(1, L + 1):
        mem = stack.memories[l, -1]
        denom = np.linalg.norm(mem) * fnorm
        if denom == 0.0:
            raise ValueError(f"degenerate zero-norm memory at layer {l}")
        errs[l - 1] = 1.0 - float(mem @ final) / denom
    # cosine rounding can land an ulp outside the mathematical range
    return np.clip(errs, 0.0, 2.0)


@dataclass
class RefinementRecord:
    task: int
    episode: int
    timestep: int
    layer: int
    representation_error: float


@dataclass
class RefinementResult:
    records: list[RefinementRecord]
    probe_mse: np.ndarray  # (L,) held-out MSE per layer
    median_error: np.ndarray  # (L,) median representation error per layer
    error_spearman: float
    probe_spearman: float


def collect_refinement(
    agent: TransformerAgent,
    family: str = "velocity",
    n_tasks: int = 30,
    episodes_per_task: int = 3,
    probe_train_tasks: int = 20,
    horizon: int = 64,
    seed: int = 0,
    task_range: tuple[float, float] | None = None,
) -> RefinementResult:
    """Run the refinement protocol: per-layer errors plus probe MSEs.

    Tasks are split probe_train_tasks / (n_tasks - probe_train_tasks) for
    the probe fit; representation errors use all tasks. Probe features are
    the query-position memory of each layer, targets the greedy action at
    that step.
    """
    L = agent.config.n_layers
    lo, hi = task_range if task_range is not None else (None, None)
    tasks = sample_tasks(family, n_tasks, rngmod.stream(seed, "tasks.analysis"), lo, hi)
    records: list[RefinementRecord] = []
    feats_per_layer: list[list[np.ndarray]] = [[] for _ in range(L)]
    targets: list[np.ndarray] = []
    is_train: list[bool] = []

    for ti, task in enumerate(tasks):
        env = make_env(family, horizon)
        env.set_task(task)
        buf = WorkingMemoryBuffer(agent.config.seq_len, env.spec.state_dim, env.spec.action_dim)
        buf.reset()
        rng = rngmod.stream(seed, f"policy.analysis.{ti}")
        for ep in range(episodes_per_task):
            traj = run_episode(env, agent, buf, rng, stochastic=True, collect_stacks=True)
            for t, stack in enumerate(traj.stacks):
                errs = representation_error(stack)
                for l in range(1, L + 1):
                    records.append(RefinementRecord(ti, ep, t, l, float(errs[l - 1])))
                for l in range(L):
                    feats_per_layer[l].append(stack.memories[l + 1, -1])
                greedy = agent.heads_np(stack.memories[L, -1][None])[0][0]
                targets.append(greedy)
                is_train.append(ti < probe_train_tasks)

    y = np.asarray(targets)
    train_mask = np.asarray(is_train)
    probe_mse = np.array(
        [
            linear_probe(
                np.asarray(feats_per_layer[l])[train_mask],
                y[train_mask],
                np.asarray(feats_per_layer[l])[~train_mask],
                y[~train_mask],
            )
            for l in range(L)
        ]
    )
    med = np.array([
        np.median([r.representation_error for r in records if r.layer == l])
        for l in range(1, L + 1)
    ])
    layers = np.arange(1, L + 1)
    error_rho = float(sstats.spearmanr(layers, med).statistic)
    probe_rho = float(sstats.spearmanr(layers, probe_mse).statistic)
    return RefinementResult(records, probe_mse, med, error_rho, probe_rho)


def linear_probe(
    x_train: np.ndarray,
    y_train: np.ndarray,
    x_test: np.ndarray,
    y_test: np.ndarray,
    ridge: float = 1e-6,
) -> float:
    """Held-out MSE of a ridge regression fit in closed form.

    A bias column is appended; the normal equations are solved directly,
    with the ridge term keeping rank-deficient designs invertible.
    """
    if y_train.ndim == 1:
        y_train = y_train[:, None]
        y_test = y_test[:, None]
    Xtr = np.hstack([x_train, np.ones((len(x_train), 1))])
    Xte = np.hstack([x_test, np.ones((len(x_test), 1))])
    gram = Xtr.T @ Xtr + ridge * np.eye(Xtr.shape[1])
    w = np.linalg.solve(gram, Xtr.T @ y_train)
    resid = Xte @ w - y_test
    return float(np.mean(resid**2))


@dataclass
class PCAResult:
    projections: np.ndarray  # (S, 3)
    explained_ratio: np.ndarray  # (3,)
    labels: np.ndarray  # (S,) task parameter per sample


def pca_project(data: np.ndarray, n_components: int = 3) -> tuple[np.ndarray, np.ndarray]:
    """Center, eigendecompose the covariance, project onto the top axes."""
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] < n_components or data.shape[1] < n_components:
        raise ValueError(
            f"need at least {n_components} samples and dims, got {data.shape}"
        )
    centered = data - data.mean(axis=0)
    cov = centered.T @ centered / (len(data) - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    eigvals = np.maximum(eigvals[order], 0.0)
    comps = eigvecs[:, order[:n_components]]
    total = eigvals.sum()
    ratio = eigvals[:n_components] / total if total > 0 else np.zeros(n_components)
    return centered @ comps, ratio


def collect_pca(
    agent: TransformerAgent,
    family: str = "velocity",
    n_tasks: int = 10,
    episodes_per_task: int = 2,
    horizon: int = 64,
    seed: int = 0,
    task_range: tuple[float, float] | None = None,
) -> PCAResult:
    """Embed executed transitions (no position terms) and project to 3-D."""
    lo, hi = task_range if task_range is not None else (None, None)
    tasks = sample_tasks(family, n_tasks, rngmod.stream(seed, "tasks.pca"), lo, hi)
    embed_w = agent.params["embed.w"].data
    rows, labels = [], []
    for ti, task in enumerate(tasks):
        env = make_env(family, horizon)
        env.set_task(task)
        buf = WorkingMemoryBuffer(agent.config.seq_len, env.spec.state_dim, env.spec.action_dim)
        buf.reset()
        rng = rngmod.stream(seed, f"policy.pca.{ti}")
        for _ in range(episodes_per_task):
            run_episode(env, agent, buf, rng, stochastic=True)
            for tr in buf.slots:
                if not tr.is_pad:
                    rows.append(tr.features() @ embed_w)
                    labels.append(task.scalar)
    proj, ratio = pca_project(np.asarray(rows))
    return PCAResult(proj, ratio, np.asarray(labels))


# -- ablation grids -----------------------------------------------------------

ABLATION_AXES = {
    "tfixup": [True, False],
    "seqlen": [1, 5, 15, 25],
    "layers": [1, 4, 8, 12],
    "heads": [1, 2, 4, 8],
}


@dataclass
class AblationSetting:
    axis: str
    value: object
    label: str
    encoder: EncoderConfig


def ablation_settings(base: EncoderConfig, axis: str) -> list[AblationSetting]:
    """Vary exactly one encoder axis; everything else stays at the base."""
    if axis not in ABLATION_AXES:
        raise ValueError(f"unknown ablation axis {axis!r}; choose from {sorted(ABLATION_AXES)}")
    out = []
    for v in ABLATION_AXES[axis]:
        if axis == "tfixup":
            # let layer-norm re-derive from the toggle
            cfg = replace(base, use_tfixup=v, use_layer_norm=None)
        elif axis == "seqlen":
            cfg = replace(base, seq_len=v)
        elif axis == "layers":
            cfg = replace(base, n_layers=v)
        else:
            cfg = replace(base, n_heads=v)
        out.append(AblationSetting(axis, v, f"{axis}={v}", cfg))
    return out


def run_ablation(
    base_encoder: EncoderConfig,
    axis: str,
    family: str,
    ppo: PPOConfig,
    total_timesteps: int,
    seeds: list[int],
    obs_dim: int,
    action_dim: int,
    head_hidden: int = 64,
    **train_kwargs,
) -> dict[str, list[tuple[int, TrainResult | None, str]]]:
    """Train every grid setting with the same seeds and budget.

    Returns {setting label: [(seed, result, note)]}; a numeric abort is
    recorded as note="diverged" with the partial result discarded rather
    than crashing the grid.
    """
    results: dict[str, list] = {}
    for setting in ablation_settings(base_encoder, axis):
        rows = []
        for seed in seeds:
            agent = TransformerAgent(
                setting.encoder, obs_dim, action_dim, head_hidden=head_hidden, seed=seed
            )
            try:
                res = meta_train(
                    agent, family, ppo, total_timesteps, seed, **train_kwargs
                )
                rows.append((seed, res, ""))
            except NumericFailure as exc:
                rows.append((seed, None, f"diverged: {exc}"))
        results[setting.label] = rows
    return results
