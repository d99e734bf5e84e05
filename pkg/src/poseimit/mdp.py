"""Progressive-prediction MDP: states are growing pose histories, actions are
length-m windows, and the transition appends the action to the state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor

__all__ = ["EpisodeConfig", "decompose", "recompose", "transition", "rollout"]


@dataclass(frozen=True)
class EpisodeConfig:
    """Prefix length t, prediction length l, window size m, step count K = l/m."""

    t: int
    l: int
    m: int

    def __post_init__(self):
        if self.t < 1 or self.m < 1 or self.l < 1:
            raise ValueError(f"episode lengths must be positive, got {self}")
        if self.l % self.m != 0:
            raise ValueError(f"prediction length {self.l} not divisible by window {self.m}")

    @property
    def K(self) -> int:
        return self.l // self.m

    @property
    def span(self) -> int:
        return self.t + self.l


def _frames_array(x) -> np.ndarray:
    arr = x.values if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"expected (frames, pose_dim), got shape {arr.shape}")
    return arr


def decompose(traj, cfg: EpisodeConfig):
    """Split a length-(t+l) trajectory into its K (state, action) pairs.

    Pair i carries the first t+(i-1)m frames as state and the following m
    frames as action; together with the first state they partition the
    trajectory exactly.
    """
    arr = _frames_array(traj)
    if arr.shape[0] != cfg.span:
        raise ValueError(
            f"trajectory has {arr.shape[0]} frames, episode needs t+l = {cfg.span}"
        )
    pairs = []
    for i in range(1, cfg.K + 1):
        cut = cfg.t + (i - 1) * cfg.m
        pairs.append((arr[:cut].copy(), arr[cut : cut + cfg.m].copy()))
    return pairs


def recompose(pairs) -> np.ndarray:
    """Inverse of decompose: first state followed by every action window."""
    if not pairs:
        raise ValueError("no pairs to recompose")
    parts = [pairs[0][0]] + [a for _, a in pairs]
    return np.concatenate(parts, axis=0)


def transition(state, action) -> np.ndarray:
    """Deterministic MDP transition: the new state is state ++ action."""
    s = _frames_array(state)
    a = _frames_array(action)
    if a.shape[0] < 1:
        raise ValueError("action must contain at least one frame")
    if s.shape[1] != a.shape[1]:
        raise ValueError(f"pose_dim mismatch: state {s.shape[1]}, action {a.shape[1]}")
    return np.concatenate([s, a], axis=0)


def rollout(policy, prefix, cfg: EpisodeConfig) -> np.ndarray:
    """Apply the policy K times, feeding each predicted window back into the
    state; returns the l predicted frames.
    """
    state = _frames_array(prefix).copy()
    if state.shape[0] != cfg.t:
        raise ValueError(f"prefix has {state.shape[0]} frames, expected t = {cfg.t}")
    windows = []
    for _ in range(cfg.K):
        action = policy(state)
        a = action.values if isinstance(action, Tensor) else np.asarray(action)
        if a.shape != (cfg.m, state.shape[1]):
            raise ValueError(
                f"policy returned shape {a.shape}, expected ({cfg.m}, {state.shape[1]})"
            )
        windows.append(a)
        state = transition(state, a)
    return np.concatenate(windows, axis=0)
