"""PPO meta-training over task batches, meta-testing, and OOD evaluation.

Collection runs the task batch in lockstep (one batched encoder forward
per timestep) with per-task noise streams, so results are identical to
rolling the tasks out one by one. Each task contributes E consecutive
episodes with working-memory carryover, concatenated into a single
trajectory for advantage estimation; the buffer and the discount both
flow across the internal episode seam, and only the block end bootstraps
zero.

Windows are snapshotted into the batch at collection time, so the update
epochs re-encode exactly the inputs the policy saw. On-policy only;
constant learning rate, no warmup.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import rng as rngmod
from .agent import TransformerAgent
from .autodiff import Parameters, Tensor
from .envs import (
    VELOCITY_OOD_RANGE,
    TaskParam,
    make_env,
    run_episode,
    sample_tasks,
)
from .memory import Transition, WorkingMemoryBuffer


class NumericFailure(RuntimeError):
    """Training aborted on a non-finite loss or gradient."""


@dataclass
class PPOConfig:
    clip_eps: float = 0.2
    gamma: float = 0.99
    gae_lambda: float = 0.95
    epochs: int = 4
    minibatch_size: int = 512
    learning_rate: float = 3e-4
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    max_grad_norm: float = 0.5

    def __post_init__(self):
        if self.clip_eps <= 0:
            raise ValueError("clip_eps must be positive")
        if not (0.0 <= self.gamma <= 1.0 and 0.0 <= self.gae_lambda <= 1.0):
            raise ValueError("gamma and gae_lambda must lie in [0, 1]")

    def to_dict(self) -> dict:
        return {
            "clip_eps": self.clip_eps,
            "gamma": self.gamma,
            "gae_lambda": self.gae_lambda,
            "epochs": self.epochs,
            "minibatch_size": self.minibatch_size,
            "learning_rate": self.learning_rate,
            "value_coef": self.value_coef,
            "entropy_coef": self.entropy_coef,
            "max_grad_norm": self.max_grad_norm,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PPOConfig":
        return cls(**d)


@dataclass
class RolloutBatch:
    window_feats: np.ndarray  # (S, N, F) exact rollout-time encoder inputs
    actions: np.ndarray  # (S, A) unclipped samples
    rewards: np.ndarray
    log_probs: np.ndarray
    values: np.ndarray
    dones: np.ndarray  # 1.0 only at task-block ends
    task_ids: np.ndarray
    episode_idx: np.ndarray
    advantages: np.ndarray = field(default=None)
    returns: np.ndarray = field(default=None)

    def __len__(self) -> int:
        return len(self.rewards)


def compute_gae(
    rewards: np.ndarray,
    values: np.ndarray,
    dones: np.ndarray,
    gamma: float,
    lam: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimation with a zero bootstrap at the end."""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    if not (len(rewards) == len(values) == len(dones)):
        raise ValueError(
            f"length mismatch: rewards {len(rewards)}, values {len(values)}, dones {len(dones)}"
        )
    T = len(rewards)
    adv = np.zeros(T)
    last = 0.0
    next_value = 0.0
    for t in range(T - 1, -1, -1):
        nonterminal = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_value * nonterminal - values[t]
        last = delta + gamma * lam * nonterminal * last
        adv[t] = last
        next_value = values[t]
    return adv, adv + values


def collect_meta_batch(
    agent: TransformerAgent,
    family: str,
    tasks: list[TaskParam],
    episodes_per_task: int,
    horizon: int,
    task_rngs: list[np.random.Generator],
    ppo: PPOConfig,
) -> RolloutBatch:
    """Roll every task's E-episode block in lockstep and mix into one batch.

    Buffers reset at task start only; inside a block they carry across the
    episode seam with terminal flags marking it.
    """
    B = len(tasks)
    if len(task_rngs) != B:
        raise ValueError("one rng stream per task required")
    envs = [make_env(family, horizon) for _ in range(B)]
    buffers = [
        WorkingMemoryBuffer(agent.config.seq_len, e.spec.state_dim, e.spec.action_dim)
        for e in envs
    ]
    for env, task in zip(envs, tasks):
        env.set_task(task)

    feats_all, act_all, rew_all, logp_all, val_all, done_all, tid_all, ep_all = (
        [], [], [], [], [], [], [], [])
    sigma = agent._sigma()
    try:
        for ep in range(episodes_per_task):
            obs = [env.reset() for env in envs]
            for t in range(horizon):
                feats = np.stack([buf.window_features(o) for buf, o in zip(buffers, obs)])
                memories = agent.memories_np(feats)
                means, values = agent.heads_np(memories)
                noise = np.stack([r.standard_normal(agent.action_dim) for r in task_rngs])
                actions = means + sigma * noise
                log_probs = agent.log_prob_np(actions, means)
                block_end = ep == episodes_per_task - 1 and t == horizon - 1
                for j, env in enumerate(envs):
                    next_obs, reward, done = env.step(actions[j])
                    executed = np.clip(actions[j], env.spec.action_low, env.spec.action_high)
                    buffers[j].push(Transition(obs[j], executed, reward, done))
                    feats_all.append(feats[j])
                    act_all.append(actions[j])
                    rew_all.append(reward)
                    logp_all.append(log_probs[j])
                    val_all.append(values[j])
                    done_all.append(1.0 if block_end else 0.0)
                    tid_all.append(j)
                    ep_all.append(ep)
                    obs[j] = next_obs
    except ad.EvaluationError as exc:
        raise ad.EvaluationError(f"{exc} (while collecting task batch)") from exc

    batch = RolloutBatch(
        window_feats=np.asarray(feats_all),
        actions=np.asarray(act_all),
        rewards=np.asarray(rew_all),
        log_probs=np.asarray(logp_all),
        values=np.asarray(val_all),
        dones=np.asarray(done_all),
        task_ids=np.asarray(tid_all),
        episode_idx=np.asarray(ep_all),
    )
    # per-task GAE over the concatenated E-episode trajectory
    adv = np.zeros(len(batch))
    ret = np.zeros(len(batch))
    for j in range(B):
        idx = np.where(batch.task_ids == j)[0]
        a, r = compute_gae(
            batch.rewards[idx], batch.values[idx], batch.dones[idx], ppo.gamma, ppo.gae_lambda
        )
        adv[idx] = a
        ret[idx] = r
    batch.advantages = adv
    batch.returns = ret
    return batch


def ppo_loss(
    agent: TransformerAgent,
    feats: np.ndarray,
    actions: np.ndarray,
    old_log_probs: np.ndarray,
    advantages: np.ndarray,
    returns: np.ndarray,
    cfg: PPOConfig,
) -> tuple[Tensor, dict]:
    """Clipped-surrogate PPO objective on one minibatch."""
    log_probs, values, entropy = agent.evaluate_actions(feats, actions)
    ratio = ad.texp(ad.sub(log_probs, Tensor(old_log_probs)))
    adv = Tensor(advantages)
    unclipped = ad.mul(ratio, adv)
    clipped = ad.mul(ad.clip(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps), adv)
    policy_loss = ad.mul(ad.tmean(ad.minimum(unclipped, clipped)), -1.0)
    verr = ad.sub(values, Tensor(returns))
    value_loss = ad.tmean(ad.mul(verr, verr))
    loss = ad.sub(
        ad.add(policy_loss, ad.mul(value_loss, cfg.value_coef)),
        ad.mul(entropy, cfg.entropy_coef),
    )
    stats = {
        "policy_loss": float(policy_loss.data),
        "value_loss": float(value_loss.data),
        "entropy": float(entropy.data),
        "clip_fraction": float(
            np.mean(np.abs(ratio.data - 1.0) > cfg.clip_eps)
        ),
        "max_ratio_dev": float(np.max(np.abs(ratio.data - 1.0))),
    }
    return loss, stats


class Adam:
    """Adam over a Parameters registry; step() consumes accumulated grads."""

    def __init__(self, params: Parameters, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}

    def step(self) -> None:
        self.t += 1
        b1t = 1.0 - self.b1**self.t
        b2t = 1.0 - self.b2**self.t
        for name, p in self.params.items():
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data = p.data - self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)
        self.params.bump()

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for k in self.params.names():
            out[f"adam.m.{k}"] = self.m[k]
            out[f"adam.v.{k}"] = self.v[k]
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray], t: int) -> None:
        self.t = t
        for k in self.params.names():
            self.m[k] = tensors[f"adam.m.{k}"].copy()
            self.v[k] = tensors[f"adam.v.{k}"].copy()


def clip_grad_norm(params: Parameters, max_norm: float) -> float:
    total = np.sqrt(sum(float((p.grad * p.grad).sum()) for p in params))
    if total > max_norm and total > 0.0:
        scale = max_norm / total
        for p in params:
            p.grad *= scale
    return float(total)


def ppo_update(
    agent: TransformerAgent,
    batch: RolloutBatch,
    cfg: PPOConfig,
    optimizer: Adam,
    shuffle_rng: np.random.Generator,
) -> dict:
    """Several epochs of shuffled minibatch updates on one rollout batch."""
    S = len(batch)
    adv = batch.advantages
    norm_adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    agg = {"loss": [], "clip_fraction": [], "entropy": [], "grad_norm": [],
           "value_loss": [], "policy_loss": []}
    first_minibatch: dict | None = None
    n_updates = 0
    for _ in range(cfg.epochs):
        perm = shuffle_rng.permutation(S)
        for start in range(0, S, cfg.minibatch_size):
            mb = perm[start : start + cfg.minibatch_size]
            loss, stats = ppo_loss(
                agent,
                batch.window_feats[mb],
                batch.actions[mb],
                batch.log_probs[mb],
                norm_adv[mb],
                batch.returns[mb],
                cfg,
            )
            if not np.isfinite(loss.data):
                raise NumericFailure(
                    f"non-finite PPO loss (policy {stats['policy_loss']}, "
                    f"value {stats['value_loss']}); aborting update"
                )
            if first_minibatch is None:
                first_minibatch = dict(stats)
            agent.params.zero_grad()
            loss.backward()
            gnorm = clip_grad_norm(agent.params, cfg.max_grad_norm)
            if not np.isfinite(gnorm):
                raise NumericFailure("non-finite gradient norm; aborting update")
            optimizer.step()
            n_updates += 1
            agg["loss"].append(float(loss.data))
            agg["clip_fraction"].append(stats["clip_fraction"])
            agg["entropy"].append(stats["entropy"])
            agg["grad_norm"].append(gnorm)
            agg["value_loss"].append(stats["value_loss"])
            agg["policy_loss"].append(stats["policy_loss"])
    out = {k: float(np.mean(v)) for k, v in agg.items()}
    out["n_updates"] = n_updates
    out["first_minibatch"] = first_minibatch
    return out


# -- evaluation protocols ----------------------------------------------------


def meta_test(
    agent: TransformerAgent,
    family: str,
    tasks: list[TaskParam],
    episodes_per_task: int,
    horizon: int,
    seed: int,
    stream_tag: str = "meta_test",
    collect_trajectories: bool = False,
):
    """Frozen-parameter adaptation: E sequential episodes per task with
    buffer carryover, stochastic policy. Returns (returns matrix, trajs)."""
    returns = np.zeros((len(tasks), episodes_per_task))
    trajs: list[list] = []
    for i, task in enumerate(tasks):
        env = make_env(family, horizon)
        env.set_task(task)
        buf = WorkingMemoryBuffer(agent.config.seq_len, env.spec.state_dim, env.spec.action_dim)
        buf.reset()
        rng = rngmod.stream(seed, f"policy.{stream_tag}.{i}")
        task_trajs = []
        for ep in range(episodes_per_task):
            traj = run_episode(env, agent, buf, rng, stochastic=True)
            returns[i, ep] = traj.episode_return
            if collect_trajectories:
                task_trajs.append(traj)
        if collect_trajectories:
            trajs.append(task_trajs)
    return returns, trajs


def evaluate_mean_return(
    agent: TransformerAgent,
    family: str,
    tasks: list[TaskParam],
    episodes_per_task: int,
    horizon: int,
    seed: int,
    stream_tag: str,
) -> tuple[float, np.ndarray]:
    """Mean per-episode return over tasks; also returns per-task means."""
    returns, _ = meta_test(agent, family, tasks, episodes_per_task, horizon, seed, stream_tag)
    per_task = returns.mean(axis=1)
    return float(per_task.mean()), per_task


def ood_eval(
    agent: TransformerAgent,
    family: str = "velocity",
    n_tasks: int = 20,
    episodes_per_task: int = 6,
    horizon: int = 64,
    seed: int = 0,
    ood_range: tuple[float, float] = VELOCITY_OOD_RANGE,
    collect_trajectories: bool = False,
):
    """meta_test over tasks drawn outside the training range."""
    tasks = sample_tasks(family, n_tasks, rngmod.stream(seed, "tasks.ood"), *ood_range)
    returns, trajs = meta_test(
        agent, family, tasks, episodes_per_task, horizon, seed, "ood",
        collect_trajectories=collect_trajectories,
    )
    return tasks, returns, trajs


def bootstrap_ci(
    values: np.ndarray, rng: np.random.Generator, n_boot: int = 1000, level: float = 0.95
) -> tuple[float, float]:
    """Percentile bootstrap CI of the mean."""
    values = np.asarray(values)
    means = np.array([
        values[rng.integers(0, len(values), size=len(values))].mean() for _ in range(n_boot)
    ])
    lo = float(np.percentile(means, 100 * (1 - level) / 2))
    hi = float(np.percentile(means, 100 * (1 + level) / 2))
    return lo, hi


@dataclass
class CurveRow:
    timesteps: int
    mean_return: float
    ci_lo: float
    ci_hi: float
    seed: int


@dataclass
class TrainResult:
    agent: TransformerAgent
    optimizer: Adam
    curve: list[CurveRow]
    total_steps: int
    iterations: int
    nan_events: int
    update_steps: int


def meta_train(
    agent: TransformerAgent,
    family: str,
    ppo: PPOConfig,
    total_timesteps: int,
    seed: int,
    tasks_per_batch: int = 16,
    episodes_per_task: int = 2,
    horizon: int = 64,
    eval_interval: int = 32768,
    eval_tasks: int = 20,
    train_range: tuple[float, float] | None = None,
    test_range: tuple[float, float] | None = None,
    stop_return: float | None = None,
    optimizer: Adam | None = None,
    start_steps: int = 0,
    start_iteration: int = 0,
    on_eval=None,
) -> TrainResult:
    """Alternate collect/update until the step budget (or early stop) is hit.

    Held-out evaluation runs on a frozen parameter snapshot every
    eval_interval steps and never mutates the agent. Fully deterministic
    given (seed, config): every random draw comes from a named stream.
    """
    lo, hi = train_range if train_range is not None else (None, None)
    tlo, thi = test_range if test_range is not None else (lo, hi)
    train_rng = rngmod.stream(seed, "tasks.train")
    test_rng = rngmod.stream(seed, "tasks.test")
    test_tasks = sample_tasks(family, eval_tasks, test_rng, tlo, thi)
    shuffle_rng = rngmod.stream(seed, "ppo.shuffle")
    optimizer = optimizer or Adam(agent.params, ppo.learning_rate)

    curve: list[CurveRow] = []
    steps = start_steps
    it = start_iteration
    nan_events = 0
    next_eval = steps + eval_interval

    def run_eval() -> CurveRow:
        mean_ret, per_task = evaluate_mean_return(
            agent, family, test_tasks, episodes_per_task, horizon, seed, f"eval.{it}"
        )
        ci_lo, ci_hi = bootstrap_ci(per_task, rngmod.stream(seed, f"eval.boot.{it}"))
        row = CurveRow(steps, mean_ret, ci_lo, ci_hi, seed)
        curve.append(row)
        if on_eval is not None:
            on_eval(row)
        return row

    stop = False
    while steps < total_timesteps and not stop:
        tasks = sample_tasks(family, tasks_per_batch, train_rng, lo, hi)
        task_rngs = [
            rngmod.stream(seed, f"policy.train.{it}.{j}") for j in range(tasks_per_batch)
        ]
        batch = collect_meta_batch(
            agent, family, tasks, episodes_per_task, horizon, task_rngs, ppo
        )
        steps += len(batch)
        try:
            ppo_update(agent, batch, ppo, optimizer, shuffle_rng)
        except NumericFailure:
            nan_events += 1
            raise
        it += 1
        if steps >= next_eval or steps >= total_timesteps:
            row = run_eval()
            next_eval += eval_interval
            if stop_return is not None and row.mean_return > stop_return:
                stop = True
    if not curve or curve[-1].timesteps != steps:
        run_eval()
    return TrainResult(
        agent=agent,
        optimizer=optimizer,
        curve=curve,
        total_steps=steps,
        iterations=it,
        nan_events=nan_events,
        update_steps=optimizer.t,
    )
