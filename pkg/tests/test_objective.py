import math

import numpy as np
import pytest

from errors import DegenerateEpisodeError, ShapeMismatchError
from objective import (adaptive_horizon, discounted_return, episode_return, loss_half, loss_l2,
                       returns_to_go, step_reward, threshold_schedule)


def test_loss_half_analytic_cases():
    ones = np.ones((4, 4, 1))
    assert loss_half(ones, ones) == 0.0
    assert loss_half(np.zeros((4, 4, 1)), ones) == pytest.approx(1.0, abs=1e-9)
    assert loss_half(np.full((1, 1, 1), 0.25), np.zeros((1, 1, 1))) == pytest.approx(0.5, abs=1e-9)


def test_loss_l2_analytic_cases():
    ones = np.ones((4, 4, 3))
    assert loss_l2(ones, ones) == 0.0
    assert loss_l2(np.zeros((4, 4, 3)), ones) == pytest.approx(1.0, abs=1e-9)
    assert loss_l2(np.full((1, 1, 1), 0.5), np.zeros((1, 1, 1))) == pytest.approx(0.25, abs=1e-9)


def test_losses_are_symmetric(rng):
    a, b = rng.uniform(size=(8, 8, 3)), rng.uniform(size=(8, 8, 3))
    assert loss_half(a, b) == loss_half(b, a)
    assert loss_l2(a, b) == loss_l2(b, a)


def test_losses_reject_shape_mismatch():
    with pytest.raises(ShapeMismatchError):
        loss_half(np.ones((4, 4, 1)), np.ones((4, 4, 3)))
    with pytest.raises(ShapeMismatchError):
        loss_l2(np.ones((4, 4, 1)), np.ones((5, 4, 1)))


def test_step_reward_cases():
    assert step_reward(0.3, 0.3, 0.8) == 0.0
    assert step_reward(0.4, 0.0, 0.8) == pytest.approx(0.5, abs=1e-9)
    assert step_reward(0.4, 0.5, 0.8) == pytest.approx(-0.125, abs=1e-9)


def test_step_reward_degenerate_initial_loss():
    with pytest.raises(DegenerateEpisodeError):
        step_reward(0.0, 0.0, 0.0)


def test_rewards_telescope(rng):
    losses = rng.uniform(0.1, 1.0, size=9)
    rewards = [step_reward(losses[t - 1], losses[t], losses[0]) for t in range(1, 9)]
    assert episode_return(rewards) == pytest.approx((losses[0] - losses[-1]) / losses[0], abs=1e-12)


def test_discounted_return_cases():
    assert discounted_return([0.1, 0.2, 0.3], 1.0) == pytest.approx(0.6, abs=1e-9)
    assert discounted_return([0.7, -0.4, 2.0], 0.0) == 0.0
    assert discounted_return([1.0, 1.0], 0.5) == pytest.approx(0.75, abs=1e-9)


def test_discounted_return_needs_rewards():
    with pytest.raises(ValueError):
        discounted_return([], 0.9)


def test_returns_to_go():
    assert np.allclose(returns_to_go([1.0, 1.0, 1.0], 0.5), [1.75, 1.5, 1.0])


def test_adaptive_horizon_cases():
    assert adaptive_horizon([0.1, 0.6, 0.2], 0.5, 8) == 2
    assert adaptive_horizon([0.1, 0.6, 0.2], -math.inf, 8) == 1
    assert adaptive_horizon([0.1, 0.2, 0.3], 0.5, 7) == 7


def test_threshold_schedule_ramps_linearly():
    assert threshold_schedule(0, 0.3, 100) == 0.0
    assert threshold_schedule(50, 0.3, 100) == pytest.approx(0.15)
    assert threshold_schedule(500, 0.3, 100) == pytest.approx(0.3)
    assert threshold_schedule(7, 0.3, 0) == 0.3
