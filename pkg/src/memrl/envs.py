"""Analytic meta-RL task families with hidden task parameters.

Three desk-scale stand-ins for the usual locomotion/manipulation
families, with linear dynamics so optimal returns have closed forms:

- velocity: scalar velocity tracking, v' = clamp(v + 0.5a, -5, 5),
  r = -|v' - v*|; the reward is ambiguous between exactly two targets.
- direction: 2-D momentum, v' = 0.9v + 0.5a, r = u * v'_x with hidden
  sign u; top speed 0.5/(1-0.9) = 5 bounds the reward.
- goal: 2-D point reaching, p' = clamp(p + 0.1a, -1, 1), r = -|p' - g|;
  every goal on a circle around p' is reward-equivalent.

Observations never include the task parameter. Dynamics are
deterministic and episodes run a fixed horizon; each env instance is an
independent state machine owned by one rollout worker.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

FAMILIES = ("velocity", "direction", "goal")

VELOCITY_TRAIN_RANGE = (0.0, 3.0)
VELOCITY_OOD_RANGE = (3.0, 4.0)


@dataclass(frozen=True)
class MetaEnvSpec:
    family: str
    state_dim: int
    action_dim: int
    horizon: int = 64
    action_low: float = -1.0
    action_high: float = 1.0
    discount: float = 0.99

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if not (self.action_low < self.action_high):
            raise ValueError("invalid action bounds")


@dataclass(frozen=True)
class TaskParam:
    family: str
    value: tuple[float, ...]

    @property
    def scalar(self) -> float:
        return self.value[0]

    def label(self) -> str:
        return "/".join(f"{v:g}" for v in self.value)


class ToyMetaEnv:
    """Deterministic fixed-horizon env bound to one hidden task."""

    def __init__(self, spec: MetaEnvSpec, init_noise: float = 0.0):
        self.spec = spec
        self.init_noise = init_noise
        self.task: TaskParam | None = None
        self.state = np.zeros(spec.state_dim)
        self.t = 0

    def set_task(self, task: TaskParam) -> None:
        if task.family != self.spec.family:
            raise ValueError(f"task family {task.family} != env family {self.spec.family}")
        self.task = task

    def reset(self, rng: np.random.Generator | None = None) -> np.ndarray:
        if self.task is None:
            raise RuntimeError("set_task before reset")
        self.state = np.zeros(self.spec.state_dim)
        if self.init_noise > 0.0 and rng is not None:
            self.state = self.state + self.init_noise * rng.standard_normal(self.spec.state_dim)
        self.t = 0
        return self.state.copy()

    def step(self, action: np.ndarray) -> tuple[np.ndarray, float, bool]:
        a = np.clip(np.asarray(action, dtype=np.float64),
                    self.spec.action_low, self.spec.action_high)
        self.state, reward = self._dynamics(self.state, a, self.task)
        self.t += 1
        return self.state.copy(), float(reward), self.t >= self.spec.horizon

    def _dynamics(self, state, action, task):
        raise NotImplementedError


class VelocityEnv(ToyMetaEnv):
    def __init__(self, horizon: int = 64, init_noise: float = 0.0):
        super().__init__(MetaEnvSpec("velocity", 1, 1, horizon), init_noise)

    def _dynamics(self, state, action, task):
        v = np.clip(state[0] + 0.5 * action[0], -5.0, 5.0)
        return np.array([v]), -abs(v - task.scalar)


class DirectionEnv(ToyMetaEnv):
    def __init__(self, horizon: int = 64, init_noise: float = 0.0):
        super().__init__(MetaEnvSpec("direction", 2, 2, horizon), init_noise)

    def _dynamics(self, state, action, task):
        v = 0.9 * state + 0.5 * action
        return v, task.scalar * v[0]


class GoalReachEnv(ToyMetaEnv):
    def __init__(self, horizon: int = 64, init_noise: float = 0.0):
        super().__init__(MetaEnvSpec("goal", 2, 2, horizon), init_noise)

    def _dynamics(self, state, action, task):
        # position clamp keeps rewards within the documented [-3, 0] bound
        p = np.clip(state + 0.1 * action, -1.0, 1.0)
        return p, -float(np.linalg.norm(p - np.asarray(task.value)))


def make_env(family: str, horizon: int = 64, init_noise: float = 0.0) -> ToyMetaEnv:
    if family == "velocity":
        return VelocityEnv(horizon, init_noise)
    if family == "direction":
        return DirectionEnv(horizon, init_noise)
    if family == "goal":
        return GoalReachEnv(horizon, init_noise)
    raise ValueError(f"unknown env family {family!r}; choose from {FAMILIES}")


def sample_tasks(
    family: str,
    n: int,
    rng: np.random.Generator,
    low: float | None = None,
    high: float | None = None,
) -> list[TaskParam]:
    """I.i.d. uniform task draws; train/test/ood callers use disjoint streams."""
    if n < 1:
        raise ValueError("need at least one task")
    if family == "velocity":
        lo = VELOCITY_TRAIN_RANGE[0] if low is None else low
        hi = VELOCITY_TRAIN_RANGE[1] if high is None else high
        if not hi > lo:
            raise ValueError(f"empty velocity range [{lo}, {hi}]")
        return [TaskParam("velocity", (float(v),)) for v in rng.uniform(lo, hi, size=n)]
    if family == "direction":
        return [
            TaskParam("direction", (float(u),))
            for u in rng.choice([-1.0, 1.0], size=n)
        ]
    if family == "goal":
        # uniform on the unit disk
        radii = np.sqrt(rng.uniform(0.0, 1.0, size=n))
        angles = rng.uniform(0.0, 2.0 * np.pi, size=n)
        return [
            TaskParam("goal", (float(r * np.cos(a)), float(r * np.sin(a))))
            for r, a in zip(radii, angles)
        ]
    raise ValueError(f"unknown env family {family!r}")


def zero_action_return(task: TaskParam, horizon: int = 64) -> float:
    """Closed-form episode return of the all-zero policy from the zero state."""
    if task.family == "velocity":
        return -abs(task.scalar) * horizon
    if task.family == "direction":
        return 0.0
    if task.family == "goal":
        return -float(np.hypot(*task.value)) * horizon
    raise ValueError(f"unknown env family {task.family!r}")


@dataclass
class Trajectory:
    """One episode: per-step records aligned by index."""

    window_feats: np.ndarray  # (T, N, F)
    actions: np.ndarray  # (T, A) unclipped samples
    rewards: np.ndarray  # (T,)
    log_probs: np.ndarray  # (T,)
    values: np.ndarray  # (T,)
    states: np.ndarray  # (T+1, state_dim), includes the initial state
    terminals: np.ndarray  # (T,) env terminal flags
    stacks: list | None = None  # per-step EpisodicMemoryStack when requested

    def __len__(self) -> int:
        return len(self.rewards)

    @property
    def episode_return(self) -> float:
        return float(self.rewards.sum())


def run_episode(
    env: ToyMetaEnv,
    agent,
    buffer,
    rng: np.random.Generator | None = None,
    stochastic: bool = True,
    collect_stacks: bool = False,
) -> Trajectory:
    """Roll one episode, pushing executed transitions into the buffer.

    The buffer is deliberately not reset here: within a task block it
    carries memories across episode boundaries. Callers reset it when the
    task changes.
    """
    from .memory import Transition

    if stochastic and rng is None:
        raise ValueError("stochastic rollout needs an rng stream")
    spec = env.spec
    obs = env.reset()
    feats, actions, rewards, log_probs, values, states, terminals = [], [], [], [], [], [obs], []
    stacks = [] if collect_stacks else None
    done = False
    while not done:
        feats.append(buffer.window_features(obs))
        if collect_stacks:
            stacks.append(agent.memory_stack(buffer, obs))
        if stochastic:
            res = agent.act(buffer, obs, rng)
            action, log_prob, value = res.action, res.log_prob, res.value
        else:
            action = agent.act_deterministic(buffer, obs)
            log_prob, value = 0.0, 0.0
        next_obs, reward, done = env.step(action)
        executed = np.clip(action, spec.action_low, spec.action_high)
        buffer.push(Transition(obs, executed, reward, done))
        actions.append(action)
        rewards.append(reward)
        log_probs.append(log_prob)
        values.append(value)
        states.append(next_obs)
        terminals.append(done)
        obs = next_obs
    return Trajectory(
        window_feats=np.asarray(feats),
        actions=np.asarray(actions),
        rewards=np.asarray(rewards),
        log_probs=np.asarray(log_probs),
        values=np.asarray(values),
        states=np.asarray(states),
        terminals=np.asarray(terminals),
        stacks=stacks,
    )
