"""
Losses, per-step reward, returns and the adaptive horizon rule.

All functions are pure.
"""
from typing import Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from errors import DegenerateEpisodeError, ShapeMismatchError

LOSS_EPSILON = 1e-8


class RewardConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    gamma: float = Field(default=0.95, ge=0.0, le=1.0)
    reward_threshold: float = 0.0
    t_max: int = Field(default=8, ge=1)


def _check_shapes(s: np.ndarray, s_star: np.ndarray) -> None:
    if s.shape != s_star.shape:
        raise ShapeMismatchError(f"image shapes differ: {s.shape} vs {s_star.shape}")


def loss_half(s: np.ndarray, s_star: np.ndarray) -> float:
    """Mean of |s - s*|^(1/2) over every pixel and channel."""
    _check_shapes(s, s_star)
    return float(np.mean(np.sqrt(np.abs(s - s_star))))


def loss_l2(s: np.ndarray, s_star: np.ndarray) -> float:
    _check_shapes(s, s_star)
    return float(np.mean((s - s_star) ** 2))


def step_reward(prev_loss: float, cur_loss: float, initial_loss: float) -> float:
    if initial_loss <= LOSS_EPSILON:
        raise DegenerateEpisodeError(f"initial loss {initial_loss:.3g} is already ~0")
    return (prev_loss - cur_loss) / initial_loss


def discounted_return(rewards: Sequence[float], gamma: float) -> float:
    """Sum of r_t * gamma^t with t starting at 1."""
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.size == 0:
        raise ValueError("discounted_return needs at least one reward")
    powers = gamma ** np.arange(1, rewards.size + 1, dtype=np.float64)
    return float(np.sum(rewards * powers))


def returns_to_go(rewards: Sequence[float], gamma: float) -> np.ndarray:
    """G_t = r_t + gamma * G_{t+1}; the per-step target for the value head."""
    out = np.zeros(len(rewards), dtype=np.float64)
    running = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        running = rewards[t] + gamma * running
        out[t] = running
    return out


def episode_return(rewards: Sequence[float]) -> float:
    """Undiscounted sum; telescopes to the fraction of the initial loss removed."""
    return float(np.sum(np.asarray(rewards, dtype=np.float64)))


def adaptive_horizon(rewards: Sequence[float], r_thresh: float, t_max: int) -> int:
    """Smallest 1-based index whose reward exceeds r_thresh, else t_max."""
    for index, reward in enumerate(rewards, start=1):
        if reward > r_thresh:
            return index
    return t_max


def threshold_schedule(episode: int, final_threshold: float, ramp_episodes: int) -> float:
    if ramp_episodes <= 0:
        return final_threshold
    fraction = min(max(episode, 0) / ramp_episodes, 1.0)
    return final_threshold * fraction
