"""
Run configuration: one TOML file, CLI overrides on top, resolved copy written
beside every run's outputs.
"""
import logging
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple

import tomli_w
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from canvas import BrushConfig
from errors import ConfigError
from learn_bc import BCConfig
from learn_rl import CurriculumConfig, PPOConfig
from objective import RewardConfig
from sim2real import StrokeStyle

logger = logging.getLogger(__name__)

SEED_ENV = "BRUSHGYM_SEED"
RESOLVED_CONFIG_NAME = "resolved_config.toml"


class EnvironmentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    canvas_size: int = Field(default=32, ge=4)
    channels: Literal[1, 3] = 1
    brush: BrushConfig = Field(default_factory=lambda: BrushConfig(window_h=36, window_w=36, l_max=8.0, w_max=3.0))
    pen_up_width: float = Field(default=0.1, ge=0.0, le=1.0)


class NetworkConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    preset: Literal["desk", "full"] = "desk"
    init_log_std: float = -0.5


class TrainingConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    seed: Optional[int] = None
    episodes: int = Field(default=20000, ge=0)
    batch_episodes: int = Field(default=16, ge=1)
    workers: int = Field(default=1, ge=1)
    checkpoint_every: int = Field(default=0, ge=0)
    log_wall_clock: bool = False
    eval_starts: int = Field(default=4, ge=1)
    reward: RewardConfig = Field(default_factory=RewardConfig)
    ppo: PPOConfig = Field(default_factory=PPOConfig)
    curriculum: CurriculumConfig = Field(default_factory=CurriculumConfig)


class SimulatorConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    p_sat: float = Field(default=0.6, gt=0.0)
    kappa: float = Field(default=1.0, gt=0.0)
    w_max: float = Field(default=1.0, gt=0.0)
    deformation_max: float = Field(default=1.0, gt=0.0)
    noise_sigma: float = Field(default=0.002, ge=0.0)
    seed: int = 0


class CalibrationConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    a_min: float = 0.0
    a_max: float = 1.0
    a_step: float = Field(default=1.0 / 64.0, gt=0.0)
    probe_count: int = Field(default=41, ge=4)
    one_sided: bool = False
    simulator: SimulatorConfig = Field(default_factory=SimulatorConfig)
    pixel_pitch_mm: float = Field(default=0.5, gt=0.0)
    origin_mm: Tuple[float, float, float] = (200.0, -50.0, 30.0)
    tilt_deg: float = 0.0
    correspondences: Optional[List[Tuple[Tuple[float, float], Tuple[float, float, float]]]] = None
    travel_height_mm: float = Field(default=5.0, ge=0.0)
    style: Optional[StrokeStyle] = None


class EvalConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    patches: int = Field(default=100, ge=1)
    patch_size: int = Field(default=64, ge=4)
    thresh_sim: float = Field(default=0.05, gt=0.0)
    max_strokes: int = Field(default=50, ge=1)
    max_dabs: int = Field(default=16, ge=1)


class PathsConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    corpus: Optional[str] = None
    glyphs: Optional[str] = None
    output_dir: str = "runs/default"


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    environment: EnvironmentConfig = Field(default_factory=EnvironmentConfig)
    network: NetworkConfig = Field(default_factory=NetworkConfig)
    training: TrainingConfig = Field(default_factory=TrainingConfig)
    bc: BCConfig = Field(default_factory=BCConfig)
    calibration: CalibrationConfig = Field(default_factory=CalibrationConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    paths: PathsConfig = Field(default_factory=PathsConfig)


def _validation_error(error: ValidationError, source: str) -> ConfigError:
    problems = [f"{'.'.join(str(p) for p in e['loc'])}: {e['msg']}" for e in error.errors()]
    return ConfigError(f"invalid configuration in {source}: " + "; ".join(problems),
                       details={"errors": problems})


def load_config(path: Optional[str | Path] = None) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        with open(path, "rb") as handle:
            data = tomllib.load(handle)
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found")
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"config file {path} is not valid TOML: {e}")
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise _validation_error(e, str(path))


def _merge(base: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def apply_overrides(config: RunConfig, overrides: Dict[str, Any]) -> RunConfig:
    """Nested overrides (flags win over file values); the result is re-validated."""
    if not overrides:
        return config
    try:
        return RunConfig.model_validate(_merge(config.model_dump(), overrides))
    except ValidationError as e:
        raise _validation_error(e, "command-line overrides")


def dotted_overrides(pairs: Dict[str, Any]) -> Dict[str, Any]:
    """{"training.episodes": 5} -> {"training": {"episodes": 5}}; None values are dropped."""
    nested: Dict[str, Any] = {}
    for dotted, value in pairs.items():
        if value is None:
            continue
        node = nested
        *parents, leaf = dotted.split(".")
        for part in parents:
            node = node.setdefault(part, {})
        node[leaf] = value
    return nested


def dump_config(config: RunConfig) -> str:
    return tomli_w.dumps(config.model_dump(mode="json", exclude_none=True))


def save_resolved_config(config: RunConfig, output_dir: str | Path) -> Path:
    path = Path(output_dir) / RESOLVED_CONFIG_NAME
    path.write_text(dump_config(config))
    return path


def resolve_seed(config: RunConfig, flag_seed: Optional[int] = None) -> int:
    """Flag, then config file, then BRUSHGYM_SEED, then 0."""
    if flag_seed is not None:
        return flag_seed
    if config.training.seed is not None:
        return config.training.seed
    env_seed = os.getenv(SEED_ENV)
    if env_seed:
        try:
            return int(env_seed)
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env_seed!r}")
    return 0
