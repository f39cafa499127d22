"""FIFO working-memory buffer and window construction.

The buffer stores the N-1 most recent transitions; reading a window appends
a query record carrying the next state with placeholder action/reward. The
buffer persists across episode boundaries within one task block (terminal
flags mark the seams) and is reset only on task change. Not shareable
across threads; each rollout worker owns one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class Transition:
    """One environment step: (state, action, reward, terminal flag)."""

    state: np.ndarray
    action: np.ndarray
    reward: float
    terminal: bool
    is_pad: bool = False

    def features(self) -> np.ndarray:
        """Flat embedding input: state, action, reward, terminal, live flag.

        The live flag is 0 for PAD/query records and 1 for real transitions,
        so a genuinely all-zero observation stays distinguishable from
        padding while PAD records embed to exactly zero.
        """
        return np.concatenate(
            [
                self.state,
                self.action,
                [self.reward, 1.0 if self.terminal else 0.0, 0.0 if self.is_pad else 1.0],
            ]
        )


def pad_transition(state_dim: int, action_dim: int) -> Transition:
    return Transition(
        state=np.zeros(state_dim),
        action=np.zeros(action_dim),
        reward=0.0,
        terminal=False,
        is_pad=True,
    )


def feature_dim(state_dim: int, action_dim: int) -> int:
    return state_dim + action_dim + 3


class WorkingMemoryBuffer:
    """Chronological queue of the last N-1 transitions, PAD-initialized."""

    def __init__(self, capacity: int, state_dim: int, action_dim: int):
        if capacity < 1:
            raise ValueError(f"capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.slots: list[Transition] = []
        self.reset()

    def reset(self) -> None:
        """Refill with N-1 PAD transitions (fresh task block)."""
        self.slots = [
            pad_transition(self.state_dim, self.action_dim)
            for _ in range(self.capacity - 1)
        ]

    def push(self, t: Transition) -> None:
        """Append newest; evict the oldest slot when full."""
        if t.state.shape != (self.state_dim,) or t.action.shape != (self.action_dim,):
            raise ValueError(
                f"transition dims {t.state.shape}/{t.action.shape} do not match "
                f"env spec ({self.state_dim},)/({self.action_dim},)"
            )
        if self.capacity == 1:
            return
        self.slots.append(t)
        if len(self.slots) > self.capacity - 1:
            del self.slots[0]

    def window(self, next_state: np.ndarray) -> list[Transition]:
        """N-1 most recent transitions plus the query record, oldest first."""
        query = Transition(
            state=np.asarray(next_state, dtype=np.float64),
            action=np.zeros(self.action_dim),
            reward=0.0,
            terminal=False,
            is_pad=True,
        )
        return list(self.slots) + [query]

    def window_features(self, next_state: np.ndarray) -> np.ndarray:
        """(N, F) float64 feature matrix for the current window."""
        return np.stack([t.features() for t in self.window(next_state)])
