"""
Canvas state, the dab renderer and egocentric observations.

A canvas is a float64 numpy array of shape (H, W, C) with values in [0, 1].
Pixel (i, j) has its center at continuous coordinate (i, j); brush positions are
continuous (row, col) pairs and may leave the canvas, dabs are clipped at the
border.
"""
import logging
import math
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np
from PIL import Image
from pydantic import BaseModel, ConfigDict, Field, model_validator

from errors import InvalidActionError, ShapeMismatchError

logger = logging.getLogger(__name__)

Canvas = np.ndarray


class BrushConfig(BaseModel):
    """Renderer and observation geometry. l_max / w_max of 0 mean "derive from the window"."""
    model_config = ConfigDict(extra="forbid")

    window_h: int = Field(default=84, ge=2)
    window_w: int = Field(default=84, ge=2)
    l_max: float = Field(default=0.0, ge=0.0)
    w_max: float = Field(default=0.0, ge=0.0)
    opacity: float = Field(default=1.0, ge=0.0, le=1.0)
    background: float = Field(default=1.0, ge=0.0, le=1.0)

    @model_validator(mode="after")
    def _derive_reach(self):
        if self.window_h % 2 or self.window_w % 2:
            raise ValueError("observation window dimensions must be even")
        if self.l_max <= 0.0:
            self.l_max = self.window_h / 2.0
        if self.w_max <= 0.0:
            self.w_max = self.window_h / 8.0
        return self

    @property
    def window(self) -> Tuple[int, int]:
        return self.window_h, self.window_w


class Action(BaseModel):
    """Normalized stroke action [alpha, length, width, r, g, b]."""
    alpha: float = Field(ge=0.0, le=1.0)
    length: float = Field(ge=0.0, le=1.0)
    width: float = Field(ge=0.0, le=1.0)
    color: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    @model_validator(mode="before")
    @classmethod
    def _check_components(cls, data):
        # NaN and out-of-range components surface as InvalidActionError, not ValidationError
        if not isinstance(data, dict):
            return data
        try:
            vector = np.asarray([data["alpha"], data["length"], data["width"],
                                 *data.get("color", (0.0, 0.0, 0.0))], dtype=np.float64)
        except (KeyError, TypeError, ValueError):
            return data
        if vector.shape == (6,):
            check_action_vector(vector)
        return data

    @classmethod
    def from_vector(cls, vector: Sequence[float]) -> "Action":
        values = check_action_vector(vector)
        return cls(alpha=float(values[0]), length=float(values[1]), width=float(values[2]),
                   color=(float(values[3]), float(values[4]), float(values[5])))

    def to_vector(self) -> np.ndarray:
        return np.array([self.alpha, self.length, self.width, *self.color], dtype=np.float64)

    @property
    def pen_down(self) -> bool:
        return self.width > 0.0


class BrushState(BaseModel):
    position: Tuple[float, float]
    pen_down: bool = False


class Observation(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    canvas_window: np.ndarray
    reference_window: np.ndarray

    @property
    def window(self) -> Tuple[int, int]:
        return self.canvas_window.shape[0], self.canvas_window.shape[1]

    def stacked(self) -> np.ndarray:
        """Channel-first tensor (2C, h_o, w_o): canvas channels, then reference channels."""
        both = np.concatenate([self.canvas_window, self.reference_window], axis=2)
        return np.ascontiguousarray(both.transpose(2, 0, 1))


class StrokeRecord(BaseModel):
    """A brush start position and the actions applied from it, in order."""
    start: Tuple[float, float]
    actions: List[Action] = Field(default_factory=list)


def check_action_vector(vector: Sequence[float]) -> np.ndarray:
    values = np.asarray(vector, dtype=np.float64).reshape(-1)
    if values.shape[0] != 6:
        raise InvalidActionError(f"action must have 6 components, got {values.shape[0]}")
    if not np.all(np.isfinite(values)):
        raise InvalidActionError(f"action has non-finite components: {values.tolist()}")
    if np.any(values < 0.0) or np.any(values > 1.0):
        raise InvalidActionError(f"action components must lie in [0, 1]: {values.tolist()}")
    return values


def blank_canvas(height: int, width: int, channels: int = 1, background: float = 1.0) -> Canvas:
    if height < 1 or width < 1 or channels not in (1, 3):
        raise ShapeMismatchError(f"invalid canvas shape ({height}, {width}, {channels})")
    return np.full((height, width, channels), float(background), dtype=np.float64)


def assert_unit_range(canvas: Canvas) -> None:
    assert canvas.min() >= 0.0 and canvas.max() <= 1.0, "canvas left the unit interval"


def displacement(action: Action, config: BrushConfig) -> Tuple[float, float]:
    theta = 2.0 * math.pi * action.alpha
    reach = config.l_max * action.length
    return reach * math.cos(theta), reach * math.sin(theta)


def update_position(brush: BrushState, action: Action, config: BrushConfig) -> BrushState:
    d_row, d_col = displacement(action, config)
    row, col = brush.position
    return BrushState(position=(row + d_row, col + d_col), pen_down=action.pen_down)


def _ink(color: Sequence[float], channels: int) -> np.ndarray:
    color = np.asarray(color, dtype=np.float64)
    if channels == 1:
        return np.array([color.mean()])
    return color


def stamp_segment(pixels: Canvas, start: Sequence[float], end: Sequence[float], radius: float,
                  color: Sequence[float], opacity: float = 1.0) -> None:
    """Stamp dabs of `radius` from start to end, in place."""
    height, width, channels = pixels.shape
    start = np.asarray(start, dtype=np.float64)
    delta = np.asarray(end, dtype=np.float64) - start
    length = float(math.hypot(delta[0], delta[1]))
    spacing = max(1.0, radius / 2.0)
    count = int(math.ceil(length / spacing)) + 1 if length > 0.0 else 1
    steps = np.linspace(0.0, 1.0, count) if count > 1 else np.zeros(1)
    centers = start[None, :] + steps[:, None] * delta[None, :]

    reach = radius + 0.5
    r0 = max(int(math.floor(centers[:, 0].min() - reach)), 0)
    r1 = min(int(math.ceil(centers[:, 0].max() + reach)) + 1, height)
    c0 = max(int(math.floor(centers[:, 1].min() - reach)), 0)
    c1 = min(int(math.ceil(centers[:, 1].max() + reach)) + 1, width)
    if r0 >= r1 or c0 >= c1:
        return

    rows = np.arange(r0, r1, dtype=np.float64)[:, None]
    cols = np.arange(c0, c1, dtype=np.float64)[None, :]
    keep = np.ones((r1 - r0, c1 - c0))
    for center_row, center_col in centers:
        distance = np.sqrt((rows - center_row) ** 2 + (cols - center_col) ** 2)
        coverage = np.clip(radius + 0.5 - distance, 0.0, 1.0)
        keep *= 1.0 - opacity * coverage
    alpha = (1.0 - keep)[:, :, None]
    region = pixels[r0:r1, c0:c1, :]
    blended = region * (1.0 - alpha) + _ink(color, channels)[None, None, :] * alpha
    pixels[r0:r1, c0:c1, :] = np.clip(blended, 0.0, 1.0)


def stamp_polyline(canvas: Canvas, points: Sequence[Sequence[float]], radius: float,
                   color: Sequence[float], config: BrushConfig) -> Canvas:
    """Rasterize a polyline with the dab model; returns a new canvas."""
    out = canvas.copy()
    points = np.asarray(points, dtype=np.float64)
    if len(points) == 1:
        stamp_segment(out, points[0], points[0], radius, color, config.opacity)
    for start, end in zip(points[:-1], points[1:]):
        stamp_segment(out, start, end, radius, color, config.opacity)
    assert_unit_range(out)
    return out


def render_action(canvas: Canvas, brush: BrushState, action: Action,
                  config: BrushConfig) -> Tuple[Canvas, BrushState]:
    """Apply one action: move the brush and, if the width is nonzero, paint the swept segment."""
    check_action_vector(action.to_vector())
    moved = update_position(brush, action, config)
    out = canvas.copy()
    if action.width > 0.0:
        stamp_segment(out, brush.position, moved.position, config.w_max * action.width,
                      action.color, config.opacity)
    assert_unit_range(out)
    return out, moved


def replay_strokes(canvas: Canvas, strokes: Sequence[StrokeRecord], config: BrushConfig) -> Canvas:
    for stroke in strokes:
        brush = BrushState(position=stroke.start)
        for action in stroke.actions:
            canvas, brush = render_action(canvas, brush, action, config)
    return canvas


def extract_observation(canvas: Canvas, reference: Canvas, brush: BrushState,
                        window: Tuple[int, int]) -> Observation:
    if canvas.shape != reference.shape:
        raise ShapeMismatchError(f"canvas {canvas.shape} and reference {reference.shape} differ")
    win_h, win_w = window
    if win_h % 2 or win_w % 2:
        raise ShapeMismatchError(f"observation window must be even, got {window}")
    height, width, channels = canvas.shape
    center_row = int(math.floor(brush.position[0]))
    center_col = int(math.floor(brush.position[1]))
    top, left = center_row - win_h // 2, center_col - win_w // 2

    src_r0, src_r1 = max(top, 0), min(top + win_h, height)
    src_c0, src_c1 = max(left, 0), min(left + win_w, width)
    crops = []
    for image in (canvas, reference):
        crop = np.zeros((win_h, win_w, channels), dtype=np.float64)
        if src_r0 < src_r1 and src_c0 < src_c1:
            crop[src_r0 - top:src_r1 - top, src_c0 - left:src_c1 - left, :] = image[src_r0:src_r1, src_c0:src_c1, :]
        crops.append(crop)
    return Observation(canvas_window=crops[0], reference_window=crops[1])


def load_image(path: str | Path, channels: int | None = None) -> Canvas:
    """Read PNG/PPM/PGM into a unit-interval canvas. channels=None keeps gray as 1, color as 3."""
    with Image.open(path) as image:
        if channels is None:
            channels = 1 if image.mode in ("L", "1", "I", "I;16", "F") else 3
        converted = image.convert("L" if channels == 1 else "RGB")
        pixels = np.asarray(converted, dtype=np.float64) / 255.0
    if pixels.ndim == 2:
        pixels = pixels[:, :, None]
    return pixels


def save_image(path: str | Path, canvas: Canvas) -> None:
    data = np.round(np.clip(canvas, 0.0, 1.0) * 255.0).astype(np.uint8)
    path = Path(path)
    image = Image.fromarray(data[:, :, 0] if data.shape[2] == 1 else data)
    fmt = "PPM" if path.suffix.lower() in (".ppm", ".pgm") else "PNG"
    image.save(path, format=fmt)
    logger.debug(f"Wrote {path} ({data.shape[1]}x{data.shape[0]}x{data.shape[2]})")
