import csv

import numpy as np
import pytest
from scipy.stats import chisquare

from canvas import BrushConfig, blank_canvas
from errors import DegenerateEpisodeError
from learn_rl import (CurriculumConfig, CurriculumState, EpisodeTrace, PaintingEnv, PPOConfig,
                      advance_curriculum, collect_episode, evaluate_policy, horizon_for, initial_curriculum,
                      rollout_image, sample_reference, train_rl, update_policy)
from objective import RewardConfig, loss_half, returns_to_go
from policy_net import (ActionDistribution, AdamOptimizer, NetworkSpec, forward, forward_batch, init_params,
                        sample_action)
from tests.conftest import disk_reference


def _state(horizon, r_thresh=10.0):
    return CurriculumState(episode=0, horizon=horizon, r_thresh=r_thresh)


def test_horizon_one_gives_single_step_trace(desk_params, brush_config):
    env = PaintingEnv(disk_reference(), brush_config)
    trace = collect_episode(desk_params, env, "disk", _state(1), np.random.default_rng(0))
    assert len(trace) == 1
    assert trace.observations.shape == (1, 2, 36, 36)


def test_blank_reference_is_degenerate(desk_params, brush_config):
    env = PaintingEnv(blank_canvas(32, 32), brush_config)
    with pytest.raises(DegenerateEpisodeError):
        collect_episode(desk_params, env, "blank", _state(4), np.random.default_rng(0))


def test_same_seed_gives_identical_trace(desk_params, brush_config):
    traces = [collect_episode(desk_params, PaintingEnv(disk_reference(), brush_config), "disk", _state(6),
                              np.random.default_rng(11)) for _ in range(2)]
    assert np.array_equal(traces[0].raw_actions, traces[1].raw_actions)
    assert np.array_equal(traces[0].rewards, traces[1].rewards)
    assert traces[0].start == traces[1].start


def test_episode_stops_at_first_reward_above_threshold(desk_params, brush_config):
    trace = collect_episode(desk_params, PaintingEnv(disk_reference(), brush_config), "disk",
                            _state(8, r_thresh=-10.0), np.random.default_rng(2))
    assert len(trace) == 1


def test_rewards_telescope_over_random_episodes(desk_params, brush_config):
    rng = np.random.default_rng(99)
    env = PaintingEnv(disk_reference(radius=9.0), brush_config)
    for _ in range(100):
        trace = collect_episode(desk_params, env, "disk", _state(8), rng, pen_up_width=0.1)
        expected = (trace.initial_loss - trace.final_loss) / trace.initial_loss
        assert trace.normalized_return == pytest.approx(expected, abs=1e-9)


def test_trace_rewards_can_be_recomputed(desk_params, brush_config):
    reference = disk_reference()
    trace = collect_episode(desk_params, PaintingEnv(reference, brush_config), "disk", _state(5),
                            np.random.default_rng(4))
    env = PaintingEnv(reference, brush_config)
    env.reset(trace.start)
    replayed = [env.step(action) for action in trace.actions]
    assert np.allclose(replayed, trace.rewards, atol=1e-9, rtol=0.0)
    assert env.loss == pytest.approx(loss_half(env.canvas, reference))


def _bandit_trace(params, obs, rng):
    loc, value, _ = forward_batch(params, obs[None])
    sampled = sample_action(ActionDistribution(loc=loc[0], log_std=params.arrays["log_std"]), rng)
    reward = 1.0 if sampled.action.width > 0.5 else 0.0
    return EpisodeTrace(reference_id="pixel", start=(0.0, 0.0), observations=obs[None],
                        raw_actions=sampled.raw[None], actions=[sampled.action],
                        log_probs=np.array([sampled.log_prob]), rewards=np.array([reward]),
                        values=np.array([float(value[0])]), initial_loss=1.0, final_loss=1.0 - reward)


def test_bandit_learns_to_paint_wide(desk_params):
    rng = np.random.default_rng(0)
    obs = np.random.default_rng(1).uniform(size=(2, 36, 36))
    ppo = PPOConfig(learning_rate=1e-2, epochs=4, minibatch_size=16)
    optimizer = AdamOptimizer(learning_rate=ppo.learning_rate)
    params = desk_params
    for _ in range(2000 // 16):
        traces = [_bandit_trace(params, obs, rng) for _ in range(16)]
        params, _ = update_policy(params, traces, ppo, RewardConfig(), optimizer, rng)
    dist, _ = forward(params, obs)
    draws = dist.loc[2] + np.exp(dist.log_std[2]) * np.random.default_rng(5).standard_normal(10000)
    assert np.mean(draws > 0.0) > 0.9


def test_zero_advantages_leave_policy_head_alone(desk_params, brush_config):
    env = PaintingEnv(disk_reference(), brush_config)
    traces = [collect_episode(desk_params, env, "disk", _state(3), np.random.default_rng(s)) for s in range(4)]
    gamma = RewardConfig().gamma
    for trace in traces:
        trace.values = returns_to_go(trace.rewards, gamma)
    updated, _ = update_policy(desk_params, traces, PPOConfig(learning_rate=1e-3), RewardConfig(),
                               AdamOptimizer(), np.random.default_rng(0))
    assert np.array_equal(updated.arrays["pi_w"], desk_params.arrays["pi_w"])
    assert np.array_equal(updated.arrays["pi_b"], desk_params.arrays["pi_b"])
    assert np.all(updated.arrays["log_std"] > desk_params.arrays["log_std"])


def test_learning_rate_zero_leaves_params_unchanged(desk_params, brush_config):
    env = PaintingEnv(disk_reference(), brush_config)
    traces = [collect_episode(desk_params, env, "disk", _state(3), np.random.default_rng(s)) for s in range(4)]
    updated, stats = update_policy(desk_params, traces, PPOConfig(learning_rate=0.0), RewardConfig(),
                                   AdamOptimizer(), np.random.default_rng(0))
    assert stats["steps"] > 0
    assert all(np.array_equal(updated.arrays[n], desk_params.arrays[n]) for n in desk_params.arrays)


def test_equal_scores_sample_uniformly():
    ids = ["a", "b", "c", "d", "e"]
    state = CurriculumState(difficulty={i: 0.5 for i in ids})
    passed = 0
    for seed in range(5):
        rng = np.random.default_rng(seed)
        draws = [sample_reference(state, ids, rng) for _ in range(10000)]
        counts = [draws.count(i) for i in ids]
        passed += chisquare(counts).pvalue > 0.01
    assert passed >= 4


def test_hard_reference_is_drawn_by_formula():
    ids = ["hard", "x", "y", "z"]
    state = CurriculumState(difficulty={"hard": 1.0, "x": 0.0, "y": 0.0, "z": 0.0})
    rng = np.random.default_rng(3)
    draws = [sample_reference(state, ids, rng, epsilon=0.01) for _ in range(10000)]
    expected = 1.01 / (1.0 + len(ids) * 0.01)
    assert draws.count("hard") / len(draws) == pytest.approx(expected, abs=0.01)


def test_perfect_returns_drive_score_to_zero():
    config = CurriculumConfig(difficulty_momentum=0.2)
    state = initial_curriculum(config)
    for _ in range(60):
        state = advance_curriculum(state, config, [("solved", 1.0)])
    assert state.difficulty["solved"] < 1e-4
    assert state.episode == 60


def test_horizon_schedule():
    config = CurriculumConfig(initial_horizon=1, grow_every=100, horizon_cap=8)
    state = advance_curriculum(initial_curriculum(config), config, [], skipped=250)
    assert state.horizon == 3
    assert horizon_for(10**6, config) == 8
    horizons = [horizon_for(e, config) for e in range(0, 2000, 37)]
    assert horizons == sorted(horizons)


def test_disabled_curriculum_keeps_horizon_constant():
    config = CurriculumConfig(enabled=False, horizon_cap=5, r_thresh_final=0.3)
    state = initial_curriculum(config)
    assert (state.horizon, state.r_thresh) == (5, 0.3)
    for _ in range(10):
        state = advance_curriculum(state, config, [("a", 0.1)] * 50)
        assert state.horizon == 5


def test_rollout_on_blank_reference_paints_nothing(desk_params, brush_config):
    reference = blank_canvas(32, 32)
    result = rollout_image(desk_params, reference, brush_config, thresh_sim=0.01, max_strokes=10)
    assert result.strokes == []
    assert np.array_equal(result.canvas, reference)


def test_negative_value_head_ends_every_stroke_after_one_action(desk_params, brush_config):
    params = desk_params.copy()
    params.arrays["v_w"][...] = 0.0
    params.arrays["v_b"][...] = -1.0
    result = rollout_image(params, disk_reference(), brush_config, thresh_sim=0.0, max_strokes=4)
    assert len(result.strokes) == 4
    assert all(len(stroke.actions) == 1 for stroke in result.strokes)


def test_rollout_respects_render_budget(desk_params, brush_config):
    params = desk_params.copy()
    params.arrays["v_w"][...] = 0.0
    params.arrays["v_b"][...] = 5.0
    renders = []
    result = rollout_image(params, disk_reference(), brush_config, thresh_sim=0.0, max_strokes=3,
                           max_dabs=4, on_stroke=lambda n, canvas: renders.append(n))
    assert renders == [1, 2, 3]
    assert sum(len(s.actions) for s in result.strokes) <= 3 * 4
    assert len(result.rewards) == sum(len(s.actions) for s in result.strokes)


def test_max_strokes_one(desk_params, brush_config):
    result = rollout_image(desk_params, disk_reference(), brush_config, thresh_sim=0.0, max_strokes=1)
    assert len(result.strokes) <= 1


def test_evaluate_policy_is_seeded(desk_params, brush_config):
    references = {"disk": disk_reference(), "blank": blank_canvas(32, 32)}
    first = evaluate_policy(desk_params, references, brush_config, horizon=3, seed=8)
    second = evaluate_policy(desk_params, references, brush_config, horizon=3, seed=8)
    assert first == second


def _train(tmp_path, name, workers=1, episodes=48):
    config = BrushConfig(window_h=36, window_w=36, l_max=8.0, w_max=3.0)
    params = init_params(NetworkSpec.for_preset("desk", 2, 36, 36), np.random.default_rng(0))
    out = tmp_path / name
    out.mkdir()
    result = train_rl(params, {"disk": disk_reference(), "small": disk_reference(radius=3.0)}, config,
                      PPOConfig(minibatch_size=16), CurriculumConfig(grow_every=16), RewardConfig(),
                      episodes=episodes, seed=21, batch_episodes=16, workers=workers,
                      log_path=out / "train_log.csv", checkpoint_dir=out, checkpoint_every=32)
    return result, out


def test_training_is_reproducible_and_worker_independent(tmp_path):
    first, first_dir = _train(tmp_path, "one")
    second, second_dir = _train(tmp_path, "two", workers=3)
    assert (first_dir / "train_log.csv").read_bytes() == (second_dir / "train_log.csv").read_bytes()
    assert all(np.array_equal(first.params.arrays[n], second.params.arrays[n]) for n in first.params.arrays)
    with open(first_dir / "train_log.csv") as handle:
        rows = list(csv.DictReader(handle))
    assert [int(r["episode"]) for r in rows] == [16, 32, 48]
    assert [int(r["horizon"]) for r in rows] == [2, 3, 4]
    assert all(r["wall_ms"] == "0" for r in rows)
    assert (first_dir / "checkpoint_0000032.bgck").exists()


def test_zero_episodes_returns_initial_params(tmp_path):
    result, out = _train(tmp_path, "none", episodes=0)
    initial = init_params(NetworkSpec.for_preset("desk", 2, 36, 36), np.random.default_rng(0))
    assert all(np.array_equal(result.params.arrays[n], initial.arrays[n]) for n in initial.arrays)
    assert result.log_rows == []
