"""
Policy-gradient training with curriculum, adaptive horizon and difficulty-based
reference sampling, plus the deterministic rollout used at paint time.
"""
import csv
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from canvas import (Action, BrushConfig, BrushState, Canvas, StrokeRecord, blank_canvas,
                    extract_observation, render_action)
from errors import DegenerateEpisodeError
from objective import (LOSS_EPSILON, RewardConfig, episode_return, loss_half, returns_to_go,
                       step_reward, threshold_schedule)
from policy_net import (ACTION_DIM, ActionDistribution, AdamOptimizer, PolicyParams, backward,
                        forward, forward_batch, gaussian_log_prob, sample_action, save_checkpoint,
                        to_action)

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("episode", "mean_return", "loss_half", "horizon", "r_thresh", "wall_ms")


class CurriculumConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    enabled: bool = True
    initial_horizon: int = Field(default=1, ge=1)
    horizon_cap: int = Field(default=8, ge=1)
    grow_every: int = Field(default=100, ge=1)
    r_thresh_final: float = 0.3
    r_thresh_ramp_episodes: int = Field(default=5000, ge=0)
    difficulty_epsilon: float = Field(default=0.01, gt=0.0)
    difficulty_momentum: float = Field(default=0.1, gt=0.0, le=1.0)


class PPOConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    learning_rate: float = Field(default=3e-4, ge=0.0)
    clip: float = Field(default=0.2, gt=0.0)
    entropy_coef: float = Field(default=0.01, ge=0.0)
    value_coef: float = Field(default=0.5, ge=0.0)
    epochs: int = Field(default=4, ge=1)
    minibatch_size: int = Field(default=64, ge=1)
    max_grad_norm: float = Field(default=0.5, gt=0.0)
    normalize_advantages: bool = True


class CurriculumState(BaseModel):
    episode: int = 0
    horizon: int = 1
    r_thresh: float = 0.0
    difficulty: Dict[str, float] = Field(default_factory=dict)


class EpisodeTrace(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    reference_id: str
    start: Tuple[float, float]
    observations: np.ndarray
    raw_actions: np.ndarray
    actions: List[Action]
    log_probs: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    initial_loss: float
    final_loss: float

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def normalized_return(self) -> float:
        return episode_return(self.rewards)


class RolloutResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    canvas: np.ndarray
    strokes: List[StrokeRecord]
    initial_loss: float
    final_loss: float
    rewards: List[float]


class TrainResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    params: PolicyParams
    curriculum: CurriculumState
    log_rows: List[Dict[str, float]]
    skipped_episodes: int = 0
    skipped_updates: int = 0


class PaintingEnv:
    """One canvas painted towards one reference. Not shared between workers."""

    def __init__(self, reference: Canvas, config: BrushConfig):
        self.reference = reference
        self.config = config
        self.canvas = blank_canvas(*reference.shape[:2], reference.shape[2], config.background)
        self.brush = BrushState(position=(0.0, 0.0))
        self.initial_loss = loss_half(self.canvas, reference)
        self.loss = self.initial_loss

    def reset(self, position: Tuple[float, float]) -> None:
        height, width, channels = self.reference.shape
        self.canvas = blank_canvas(height, width, channels, self.config.background)
        self.brush = BrushState(position=position)
        self.initial_loss = loss_half(self.canvas, self.reference)
        self.loss = self.initial_loss
        if self.initial_loss <= LOSS_EPSILON:
            raise DegenerateEpisodeError("reference already matches the blank canvas")

    def observe(self) -> np.ndarray:
        return extract_observation(self.canvas, self.reference, self.brush, self.config.window).stacked()

    def step(self, action: Action) -> float:
        self.canvas, self.brush = render_action(self.canvas, self.brush, action, self.config)
        current = loss_half(self.canvas, self.reference)
        reward = step_reward(self.loss, current, self.initial_loss)
        self.loss = current
        return reward


def random_start(reference: Canvas, rng: np.random.Generator) -> Tuple[float, float]:
    height, width = reference.shape[:2]
    return float(rng.uniform(0.0, height)), float(rng.uniform(0.0, width))


def collect_episode(params: PolicyParams, env: PaintingEnv, reference_id: str,
                    curriculum: CurriculumState, rng: np.random.Generator,
                    pen_up_width: float = 0.0) -> EpisodeTrace:
    """Sample one stroke: stops at the first reward above r_thresh or at the curriculum horizon."""
    start = random_start(env.reference, rng)
    env.reset(start)
    observations, raws, actions, log_probs, rewards, values = [], [], [], [], [], []
    log_std = params.arrays["log_std"]
    for _ in range(curriculum.horizon):
        obs = env.observe()
        loc, value, _ = forward_batch(params, obs)
        sampled = sample_action(ActionDistribution(loc=loc[0], log_std=log_std), rng, pen_up_width)
        reward = env.step(sampled.action)
        observations.append(obs)
        raws.append(sampled.raw)
        actions.append(sampled.action)
        log_probs.append(sampled.log_prob)
        rewards.append(reward)
        values.append(float(value[0]))
        if reward > curriculum.r_thresh:
            break
    return EpisodeTrace(reference_id=reference_id, start=start, observations=np.stack(observations),
                        raw_actions=np.stack(raws), actions=actions, log_probs=np.array(log_probs),
                        rewards=np.array(rewards), values=np.array(values),
                        initial_loss=env.initial_loss, final_loss=env.loss)


def update_policy(params: PolicyParams, traces: Sequence[EpisodeTrace], ppo: PPOConfig,
                  reward_config: RewardConfig, optimizer: AdamOptimizer,
                  rng: np.random.Generator) -> Tuple[PolicyParams, Dict[str, float]]:
    """Clipped-surrogate update with a value baseline and entropy bonus."""
    if not traces:
        raise ValueError("update_policy needs at least one episode")
    obs = np.concatenate([t.observations for t in traces])
    raw = np.concatenate([t.raw_actions for t in traces])
    old_log_probs = np.concatenate([t.log_probs for t in traces])
    targets = np.concatenate([returns_to_go(t.rewards, reward_config.gamma) for t in traces])
    advantages = targets - np.concatenate([t.values for t in traces])
    if ppo.normalize_advantages and advantages.size > 1:
        advantages = (advantages - advantages.mean()) / (advantages.std() + 1e-8)

    optimizer.learning_rate = ppo.learning_rate
    optimizer.max_grad_norm = ppo.max_grad_norm
    count = obs.shape[0]
    stats = {"policy_loss": 0.0, "value_loss": 0.0, "entropy": 0.0, "clip_fraction": 0.0,
             "skipped": 0.0, "steps": 0.0}
    for _ in range(ppo.epochs):
        order = rng.permutation(count)
        for begin in range(0, count, ppo.minibatch_size):
            idx = order[begin:begin + ppo.minibatch_size]
            n = len(idx)
            loc, value, cache = forward_batch(params, obs[idx])
            log_std = params.arrays["log_std"]
            log_prob = gaussian_log_prob(raw[idx], loc, log_std)
            ratio = np.exp(log_prob - old_log_probs[idx])
            adv = advantages[idx]
            unclipped = ratio * adv
            clipped = np.clip(ratio, 1.0 - ppo.clip, 1.0 + ppo.clip) * adv
            active = unclipped <= clipped

            policy_loss = -float(np.mean(np.minimum(unclipped, clipped)))
            value_loss = float(np.mean((value - targets[idx]) ** 2))
            entropy = float(np.sum(log_std + 0.5 * np.log(2.0 * np.pi * np.e)))

            grad_log_prob = np.where(active, -adv * ratio, 0.0) / n
            inv_var = np.exp(-2.0 * log_std)
            diff = raw[idx] - loc
            grad_loc = grad_log_prob[:, None] * diff * inv_var
            grad_log_std = np.sum(grad_log_prob[:, None] * (diff * diff * inv_var - 1.0), axis=0)
            grad_log_std = grad_log_std - ppo.entropy_coef * np.ones(ACTION_DIM)
            grad_value = ppo.value_coef * 2.0 * (value - targets[idx]) / n

            grads = backward(params, cache, grad_loc, grad_value, grad_log_std)
            if not all(np.all(np.isfinite(g)) for g in grads.values()):
                logger.warning("Non-finite gradient, skipping policy step")
                stats["skipped"] += 1
                continue
            params = optimizer.step(params, grads)
            stats["policy_loss"] += policy_loss
            stats["value_loss"] += value_loss
            stats["entropy"] = entropy
            stats["clip_fraction"] += float(np.mean(~active))
            stats["steps"] += 1
    if stats["steps"]:
        for key in ("policy_loss", "value_loss", "clip_fraction"):
            stats[key] /= stats["steps"]
    return params, stats


def sample_reference(curriculum: CurriculumState, corpus_ids: Sequence[str], rng: np.random.Generator,
                     epsilon: float = 0.01) -> str:
    """Draw a reference id with probability proportional to difficulty + epsilon."""
    if not corpus_ids:
        raise ValueError("corpus is empty")
    weights = np.array([curriculum.difficulty.get(ref, 1.0) + epsilon for ref in corpus_ids])
    index = rng.choice(len(corpus_ids), p=weights / weights.sum())
    return corpus_ids[int(index)]


def advance_curriculum(curriculum: CurriculumState, config: CurriculumConfig,
                       episode_stats: Sequence[Tuple[str, float]],
                       skipped: int = 0) -> CurriculumState:
    """Count the finished (and skipped) episodes, update difficulty scores and grow horizon / threshold."""
    difficulty = dict(curriculum.difficulty)
    for reference_id, normalized_return in episode_stats:
        score = difficulty.get(reference_id, 1.0)
        target = max(1.0 - normalized_return, 0.0)
        difficulty[reference_id] = score + config.difficulty_momentum * (target - score)
    episode = curriculum.episode + len(episode_stats) + skipped
    return CurriculumState(episode=episode, horizon=max(curriculum.horizon, horizon_for(episode, config)),
                           r_thresh=r_thresh_for(episode, config), difficulty=difficulty)


def horizon_for(episode: int, config: CurriculumConfig) -> int:
    if not config.enabled:
        return config.horizon_cap
    return min(config.horizon_cap, config.initial_horizon + episode // config.grow_every)


def r_thresh_for(episode: int, config: CurriculumConfig) -> float:
    if not config.enabled:
        return config.r_thresh_final
    return threshold_schedule(episode, config.r_thresh_final, config.r_thresh_ramp_episodes)


def initial_curriculum(config: CurriculumConfig) -> CurriculumState:
    return CurriculumState(episode=0, horizon=horizon_for(0, config), r_thresh=r_thresh_for(0, config))


def rollout_image(params: PolicyParams, reference: Canvas, config: BrushConfig, thresh_sim: float,
                  max_strokes: int, max_dabs: int = 16, rng: Optional[np.random.Generator] = None,
                  pen_up_width: float = 0.0,
                  on_stroke: Optional[Callable[[int, Canvas], None]] = None) -> RolloutResult:
    """Paint with distribution means until the loss drops to thresh_sim or the stroke budget runs out.

    Each stroke starts at a random point and continues while the value head predicts
    a positive reward.
    """
    rng = rng or np.random.default_rng(0)
    canvas = blank_canvas(*reference.shape[:2], reference.shape[2], config.background)
    initial = loss_half(canvas, reference)
    loss = initial
    strokes: List[StrokeRecord] = []
    rewards: List[float] = []
    while loss > thresh_sim and len(strokes) < max_strokes:
        brush = BrushState(position=random_start(reference, rng))
        stroke = StrokeRecord(start=brush.position)
        predicted = 1.0
        while predicted > 0.0 and len(stroke.actions) < max_dabs:
            obs = extract_observation(canvas, reference, brush, config.window)
            dist, predicted = forward(params, obs)
            action = to_action(dist.mean, pen_up_width)
            canvas, brush = render_action(canvas, brush, action, config)
            stroke.actions.append(action)
            current = loss_half(canvas, reference)
            rewards.append((loss - current) / initial if initial > LOSS_EPSILON else 0.0)
            loss = current
        strokes.append(stroke)
        if on_stroke is not None:
            on_stroke(len(strokes), canvas)
    return RolloutResult(canvas=canvas, strokes=strokes, initial_loss=initial, final_loss=loss,
                         rewards=rewards)


def evaluate_policy(params: PolicyParams, references: Dict[str, Canvas], config: BrushConfig,
                    horizon: int, starts_per_reference: int = 4, seed: int = 0,
                    pen_up_width: float = 0.0) -> float:
    """Mean normalized return of fixed-length deterministic strokes from seeded start points."""
    rng = np.random.default_rng(seed)
    returns = []
    for reference_id in sorted(references):
        env = PaintingEnv(references[reference_id], config)
        for _ in range(starts_per_reference):
            try:
                env.reset(random_start(env.reference, rng))
            except DegenerateEpisodeError:
                continue
            total = 0.0
            for _ in range(horizon):
                dist, _ = forward(params, env.observe())
                total += env.step(to_action(dist.mean, pen_up_width))
            returns.append(total)
    return float(np.mean(returns)) if returns else 0.0


def _episode_rng(seed: int, batch_index: int, slot: int) -> np.random.Generator:
    return np.random.default_rng([seed, batch_index, slot])


def train_rl(params: PolicyParams, references: Dict[str, Canvas], config: BrushConfig,
             ppo: PPOConfig, curriculum_config: CurriculumConfig, reward_config: RewardConfig,
             episodes: int, seed: int, batch_episodes: int = 16, workers: int = 1,
             pen_up_width: float = 0.0, log_path: Optional[Path] = None,
             checkpoint_dir: Optional[Path] = None, checkpoint_every: int = 0,
             log_wall_clock: bool = False) -> TrainResult:
    """Collect batches of episodes (optionally on worker threads) and apply one update per batch.

    Every episode draws from its own RNG stream derived from (seed, batch, slot), and
    results are consumed in submission order, so the worker count never changes results.
    """
    corpus_ids = sorted(references)
    master = np.random.default_rng(seed)
    optimizer = AdamOptimizer(learning_rate=ppo.learning_rate, max_grad_norm=ppo.max_grad_norm)
    curriculum = initial_curriculum(curriculum_config)
    rows: List[Dict[str, float]] = []
    skipped_episodes = 0
    skipped_updates = 0
    next_checkpoint = checkpoint_every if checkpoint_every > 0 else math.inf

    log_file = None
    writer = None
    if log_path is not None:
        log_file = open(log_path, "w", newline="")
        writer = csv.writer(log_file, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)

    def run_slot(task: Tuple[int, int, str, PolicyParams, CurriculumState]) -> Optional[EpisodeTrace]:
        batch_index, slot, reference_id, snapshot, state = task
        env = PaintingEnv(references[reference_id], config)
        try:
            return collect_episode(snapshot, env, reference_id, state,
                                   _episode_rng(seed, batch_index, slot), pen_up_width)
        except DegenerateEpisodeError:
            return None

    executor = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        batch_index = 0
        while curriculum.episode < episodes:
            started = time.perf_counter()
            size = min(batch_episodes, episodes - curriculum.episode)
            tasks = [(batch_index, slot, sample_reference(curriculum, corpus_ids, master,
                                                          curriculum_config.difficulty_epsilon),
                      params, curriculum) for slot in range(size)]
            results = list(executor.map(run_slot, tasks)) if executor else [run_slot(t) for t in tasks]
            traces = [trace for trace in results if trace is not None]
            if len(traces) < size:
                skipped_episodes += size - len(traces)
                logger.warning(f"Skipped {size - len(traces)} degenerate episodes in batch {batch_index}")

            if traces:
                params, stats = update_policy(params, traces, ppo, reward_config, optimizer, master)
                skipped_updates += int(stats["skipped"])
            curriculum = advance_curriculum(
                curriculum, curriculum_config,
                [(t.reference_id, t.normalized_return) for t in traces], skipped=size - len(traces))

            row = {
                "episode": curriculum.episode,
                "mean_return": float(np.mean([t.normalized_return for t in traces])) if traces else 0.0,
                "loss_half": float(np.mean([t.final_loss for t in traces])) if traces else 0.0,
                "horizon": curriculum.horizon,
                "r_thresh": curriculum.r_thresh,
                "wall_ms": int((time.perf_counter() - started) * 1000) if log_wall_clock else 0,
            }
            rows.append(row)
            if writer is not None:
                writer.writerow([row["episode"], f"{row['mean_return']:.9f}", f"{row['loss_half']:.9f}",
                                 row["horizon"], f"{row['r_thresh']:.9f}", row["wall_ms"]])
            if batch_index % 50 == 0:
                logger.info(f"episode {row['episode']}: return {row['mean_return']:.4f}, "
                            f"horizon {row['horizon']}, r_thresh {row['r_thresh']:.3f}")
            if checkpoint_dir is not None and curriculum.episode >= next_checkpoint:
                save_checkpoint(Path(checkpoint_dir) / f"checkpoint_{curriculum.episode:07d}.bgck", params)
                next_checkpoint += checkpoint_every
            batch_index += 1
    finally:
        if executor is not None:
            executor.shutdown()
        if log_file is not None:
            log_file.close()
    return TrainResult(params=params, curriculum=curriculum, log_rows=rows,
                       skipped_episodes=skipped_episodes, skipped_updates=skipped_updates)
