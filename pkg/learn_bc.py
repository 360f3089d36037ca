"""
Behavior cloning from stroke-ordered SVG glyphs.

Glyph paths are flattened to polylines, resampled into reach-sized segments and
replayed through the renderer to produce (observation, action) pairs. The policy
is then fitted by regressing its squashed mean onto the demo actions.

Demo dataset layout (little-endian), next to a `<path>.json` manifest:
    b"BGDS" | u16 version | u32 record count
    per record: u32 payload size | f64 row, col | f64 x6 action | f32 observation (2C*h*w)
"""
import json
import logging
import math
import re
import struct
import xml.etree.ElementTree as ET
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, TypeVar

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator
from scipy.special import expit

from canvas import (Action, BrushConfig, BrushState, Canvas, StrokeRecord, blank_canvas,
                    extract_observation, render_action, stamp_polyline, update_position)
from errors import DemoConversionError, SvgParseError
from learn_rl import EpisodeTrace
from policy_net import (TRUNK_AND_POLICY, AdamOptimizer, NetworkSpec, PolicyParams, backward,
                        check_topology, forward, forward_batch, init_value_head, to_action)

logger = logging.getLogger(__name__)
T = TypeVar("T")

DATASET_MAGIC = b"BGDS"
DATASET_VERSION = 1
DEMO_COLOR = (0.0, 0.0, 0.0)

TOKEN_RE = re.compile(r"[\s,]*(?:([A-Za-z])|([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?))")
SUPPORTED_COMMANDS = set("MmLlHhVvCcSsZz")
ARG_COUNTS = {"M": 2, "L": 2, "H": 1, "V": 1, "C": 6, "S": 4, "Z": 0}


class StrokePolyline(BaseModel):
    """Ordered (x, y) points of one stroke in scaled glyph coordinates."""
    points: List[Tuple[float, float]]
    index: int = 0

    @field_validator("points")
    @classmethod
    def _check_points(cls, points):
        if len(points) < 2:
            raise ValueError("a stroke needs at least two points")
        if not all(math.isfinite(x) and math.isfinite(y) for x, y in points):
            raise ValueError("stroke points must be finite")
        return points

    def as_canvas(self) -> np.ndarray:
        """(row, col) array: glyph x is the column, glyph y the row."""
        return np.array([(y, x) for x, y in self.points], dtype=np.float64)


class DemoPair(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    observation: np.ndarray
    action: Action
    position: Tuple[float, float]


class BCConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    learning_rate: float = Field(default=1e-3, ge=0.0)
    epochs: int = Field(default=20, ge=0)
    batch_size: int = Field(default=32, ge=1)
    w_demo: float = Field(default=0.5, gt=0.0, le=1.0)
    holdout_fraction: float = Field(default=0.1, ge=0.0, lt=1.0)
    glyph_size: int = Field(default=64, ge=8)
    max_grad_norm: float = Field(default=0.5, gt=0.0)


# ---------------------------------------------------------------------------
# SVG parsing
# ---------------------------------------------------------------------------

def _tokenize_path(data: str) -> Iterator[Tuple[int, str, bool]]:
    """Yields (offset, token, is_command)."""
    position = 0
    while position < len(data):
        match = TOKEN_RE.match(data, position)
        if match is None or match.end() == position:
            rest = data[position:]
            if rest.strip(" \t\r\n,") == "":
                return
            offset = position + len(rest) - len(rest.lstrip(" \t\r\n,"))
            raise SvgParseError(f"unexpected character {data[offset]!r} in path data", offset)
        if match.group(1):
            yield match.start(1), match.group(1), True
        else:
            yield match.start(2), match.group(2), False
        position = match.end()


def _point(a: complex) -> Tuple[float, float]:
    return float(a.real), float(a.imag)


def _segment_distance(c: complex, a: complex, b: complex) -> float:
    chord = b - a
    span = abs(chord) ** 2
    if span == 0.0:
        return abs(c - a)
    t = min(max(((c - a) * chord.conjugate()).real / span, 0.0), 1.0)
    return abs(c - (a + t * chord))


def _flatten_cubic(p0: complex, p1: complex, p2: complex, p3: complex, tolerance: float,
                   out: List[complex], depth: int = 0) -> None:
    """Adaptive de Casteljau subdivision; appends points after p0 up to and including p3."""
    # control points bound the curve, measured against the segment rather than its line
    deviation = max(_segment_distance(c, p0, p3) for c in (p1, p2))
    if deviation <= tolerance or depth >= 16:
        out.append(p3)
        return
    p01, p12, p23 = (p0 + p1) / 2, (p1 + p2) / 2, (p2 + p3) / 2
    p012, p123 = (p01 + p12) / 2, (p12 + p23) / 2
    mid = (p012 + p123) / 2
    _flatten_cubic(p0, p01, p012, mid, tolerance, out, depth + 1)
    _flatten_cubic(mid, p123, p23, p3, tolerance, out, depth + 1)


def parse_path_data(data: str, scale: float = 1.0, tolerance: float = 0.5,
                    first_index: int = 0) -> List[StrokePolyline]:
    """Parse one path's `d` attribute. Each subpath with at least two points is a stroke."""
    strokes: List[StrokePolyline] = []
    current: List[complex] = []
    position = 0j
    subpath_start = 0j
    last_control: Optional[complex] = None
    command: Optional[str] = None
    tokens = list(_tokenize_path(data))
    tokens.reverse()

    def finish():
        if len(current) >= 2:
            strokes.append(StrokePolyline(points=[_point(p * scale) for p in current],
                                          index=first_index + len(strokes)))
        current.clear()

    def take(count: int, offset: int) -> List[float]:
        values = []
        for _ in range(count):
            if not tokens or tokens[-1][2]:
                raise SvgParseError(f"command {command} expects {count} numbers", offset)
            values.append(float(tokens.pop()[1]))
        return values

    while tokens:
        offset, token, is_command = tokens[-1]
        if is_command:
            tokens.pop()
            if token not in SUPPORTED_COMMANDS:
                raise SvgParseError(f"unsupported path command {token!r}", offset)
            command = token
        elif command is None or command in "Zz":
            raise SvgParseError("number without a preceding path command", offset)

        upper = command.upper()
        relative = command.islower()
        args = take(ARG_COUNTS[upper], offset)
        base = position if relative else 0j
        control = None
        if upper not in ("M", "Z") and not current:
            current.append(position)

        if upper == "M":
            finish()
            position = base + complex(args[0], args[1])
            subpath_start = position
            current.append(position)
            # further coordinate pairs are implicit linetos
            command = "l" if relative else "L"
        elif upper == "L":
            position = base + complex(args[0], args[1])
            current.append(position)
        elif upper == "H":
            position = complex((position.real if relative else 0.0) + args[0], position.imag)
            current.append(position)
        elif upper == "V":
            position = complex(position.real, (position.imag if relative else 0.0) + args[0])
            current.append(position)
        elif upper in ("C", "S"):
            if upper == "C":
                c1 = base + complex(args[0], args[1])
                rest = args[2:]
            else:
                c1 = 2 * position - last_control if last_control is not None else position
                rest = args
            c2 = base + complex(rest[0], rest[1])
            end = base + complex(rest[2], rest[3])
            flattened: List[complex] = []
            _flatten_cubic(position * scale, c1 * scale, c2 * scale, end * scale,
                           tolerance, flattened)
            current.extend(p / scale for p in flattened)
            position = end
            control = c2
        elif upper == "Z":
            if current and position != subpath_start:
                current.append(subpath_start)
            position = subpath_start
            finish()
        last_control = control
    finish()
    return strokes


def _xml_offset(document: str, error: ET.ParseError) -> int:
    line, column = error.position
    lines = document.splitlines(keepends=True)
    return sum(len(chunk.encode("utf-8")) for chunk in lines[:line - 1]) + column


def parse_svg_strokes(document: str, scale: float = 1.0, tolerance: float = 0.5) -> List[StrokePolyline]:
    """Strokes of a full SVG document (all <path d> in document order) or of bare path data."""
    if not document.lstrip().startswith("<"):
        return parse_path_data(document, scale, tolerance)
    try:
        root = ET.fromstring(document)
    except ET.ParseError as e:
        raise SvgParseError(f"malformed SVG document: {e}", _xml_offset(document, e))
    strokes: List[StrokePolyline] = []
    for element in root.iter():
        if element.tag.rsplit("}", 1)[-1] != "path":
            continue
        strokes.extend(parse_path_data(element.get("d", ""), scale, tolerance, first_index=len(strokes)))
    return strokes


def emit_path_data(strokes: Sequence[StrokePolyline]) -> str:
    parts = []
    for stroke in strokes:
        (x0, y0), rest = stroke.points[0], stroke.points[1:]
        parts.append(f"M {float(x0)!r} {float(y0)!r} " + " ".join(f"L {float(x)!r} {float(y)!r}" for x, y in rest))
    return " ".join(parts)


def glyph_scale(document: str, size: int) -> float:
    """Scale from the document's viewBox (KanjiVG uses 109x109) to a size-pixel canvas."""
    match = re.search(r'viewBox="\s*[-\d.]+[\s,]+[-\d.]+[\s,]+([\d.]+)[\s,]+([\d.]+)', document)
    extent = max(float(match.group(1)), float(match.group(2))) if match else 109.0
    return size / extent


# ---------------------------------------------------------------------------
# Demo pairs
# ---------------------------------------------------------------------------

def resample_polyline(points: np.ndarray, step: float) -> np.ndarray:
    """Points at equal arc-length spacing no larger than `step`, endpoints kept."""
    segments = np.linalg.norm(np.diff(points, axis=0), axis=1)
    cumulative = np.concatenate([[0.0], np.cumsum(segments)])
    total = float(cumulative[-1])
    if total == 0.0:
        return points[[0, -1]]
    pieces = max(1, int(math.ceil(total / step - 1e-9)))
    targets = np.linspace(0.0, total, pieces + 1)
    rows = np.interp(targets, cumulative, points[:, 0])
    cols = np.interp(targets, cumulative, points[:, 1])
    return np.stack([rows, cols], axis=1)


def action_towards(position: Sequence[float], target: Sequence[float], width: float,
                   config: BrushConfig, color: Tuple[float, float, float] = DEMO_COLOR) -> Action:
    d_row = float(target[0]) - float(position[0])
    d_col = float(target[1]) - float(position[1])
    distance = math.hypot(d_row, d_col)
    if distance > config.l_max * (1.0 + 1e-9):
        raise DemoConversionError(f"segment of {distance:.4f}px exceeds reach {config.l_max}px")
    alpha = (math.atan2(d_col, d_row) / (2.0 * math.pi)) % 1.0 if distance > 0.0 else 0.0
    return Action(alpha=alpha, length=min(1.0, distance / config.l_max), width=width, color=color)


def rasterize_strokes(strokes: Sequence[StrokePolyline], shape: Tuple[int, int, int],
                      config: BrushConfig, w_demo: float = 0.5,
                      color: Tuple[float, float, float] = DEMO_COLOR) -> Canvas:
    canvas = blank_canvas(*shape, background=config.background)
    for stroke in strokes:
        canvas = stamp_polyline(canvas, stroke.as_canvas(), config.w_max * w_demo, color, config)
    return canvas


def strokes_to_pairs(strokes: Sequence[StrokePolyline], config: BrushConfig,
                     shape: Tuple[int, int, int], w_demo: float = 0.5,
                     reference: Optional[Canvas] = None) -> List[DemoPair]:
    """Replay the strokes in order as actions; pen-up transits connect consecutive strokes."""
    if not strokes:
        return []
    if reference is None:
        reference = rasterize_strokes(strokes, shape, config, w_demo)
    canvas = blank_canvas(*shape, background=config.background)
    brush = BrushState(position=tuple(strokes[0].as_canvas()[0]))
    pairs: List[DemoPair] = []

    def emit(target: np.ndarray, width: float):
        nonlocal canvas, brush
        action = action_towards(brush.position, target, width, config)
        observation = extract_observation(canvas, reference, brush, config.window).stacked()
        pairs.append(DemoPair(observation=observation, action=action, position=brush.position))
        canvas, brush = render_action(canvas, brush, action, config)

    for number, stroke in enumerate(strokes):
        points = stroke.as_canvas()
        if number > 0:
            gap = np.asarray(points[0]) - np.asarray(brush.position)
            pieces = max(1, int(math.ceil(float(np.hypot(*gap)) / config.l_max - 1e-9)))
            origin = np.asarray(brush.position)
            for k in range(1, pieces + 1):
                emit(origin + gap * (k / pieces), 0.0)
        for target in resample_polyline(points, config.l_max)[1:]:
            emit(target, w_demo)
    return pairs


def replay_pairs(pairs: Sequence[DemoPair], shape: Tuple[int, int, int], config: BrushConfig) -> Canvas:
    canvas = blank_canvas(*shape, background=config.background)
    if not pairs:
        return canvas
    brush = BrushState(position=pairs[0].position)
    for pair in pairs:
        canvas, brush = render_action(canvas, brush, pair.action, config)
    return canvas


def pairs_from_trace(trace: EpisodeTrace, config: BrushConfig) -> List[DemoPair]:
    """Demo pairs from a collected RL episode, using the actions it actually took."""
    brush = BrushState(position=trace.start)
    pairs = []
    for observation, action in zip(trace.observations, trace.actions):
        pairs.append(DemoPair(observation=np.asarray(observation), action=action, position=brush.position))
        brush = update_position(brush, action, config)
    return pairs


def split_dataset(items: Sequence[T], holdout_fraction: float,
                  rng: np.random.Generator) -> Tuple[List[T], List[T]]:
    """Seeded train/holdout split that keeps input order. Works on pairs or on glyph names."""
    order = rng.permutation(len(items))
    held = 0
    if holdout_fraction > 0.0 and len(items) > 1:
        held = min(max(int(round(len(items) * holdout_fraction)), 1), len(items) - 1)
    held_ids = set(order[:held].tolist())
    train = [item for i, item in enumerate(items) if i not in held_ids]
    holdout = [item for i, item in enumerate(items) if i in held_ids]
    return train, holdout


# ---------------------------------------------------------------------------
# Dataset codec
# ---------------------------------------------------------------------------

def write_demo_dataset(path: str | Path, pairs: Sequence[DemoPair], metadata: Optional[Dict] = None) -> None:
    path = Path(path)
    shape = tuple(pairs[0].observation.shape) if pairs else (0, 0, 0)
    chunks = [DATASET_MAGIC, struct.pack("<HI", DATASET_VERSION, len(pairs))]
    for pair in pairs:
        if tuple(pair.observation.shape) != shape:
            raise DemoConversionError(f"observation shape {pair.observation.shape} differs from {shape}")
        payload = (struct.pack("<2d", *pair.position) + struct.pack("<6d", *pair.action.to_vector())
                   + pair.observation.astype("<f4").tobytes())
        chunks.append(struct.pack("<I", len(payload)) + payload)
    path.write_bytes(b"".join(chunks))
    manifest = {"format": "brushgym-demos", "version": DATASET_VERSION, "count": len(pairs),
                "observation_shape": list(shape), "observation_dtype": "float32"}
    manifest.update(metadata or {})
    Path(f"{path}.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    logger.info(f"Wrote {len(pairs)} demo pairs to {path}")


def read_demo_dataset(path: str | Path) -> List[DemoPair]:
    path = Path(path)
    manifest = json.loads(Path(f"{path}.json").read_text())
    shape = tuple(manifest["observation_shape"])
    data = path.read_bytes()
    if data[:4] != DATASET_MAGIC:
        raise DemoConversionError(f"{path} is not a demo dataset")
    version, count = struct.unpack_from("<HI", data, 4)
    if version != DATASET_VERSION or count != manifest["count"]:
        raise DemoConversionError(f"{path}: header does not match its manifest")
    offset = 10
    size = int(np.prod(shape))
    pairs = []
    for _ in range(count):
        (length,) = struct.unpack_from("<I", data, offset)
        offset += 4
        if length != 16 + 48 + 4 * size:
            raise DemoConversionError(f"{path}: record at byte {offset} has length {length}")
        row, col = struct.unpack_from("<2d", data, offset)
        vector = struct.unpack_from("<6d", data, offset + 16)
        observation = np.frombuffer(data, dtype="<f4", count=size, offset=offset + 64)
        pairs.append(DemoPair(observation=observation.astype(np.float64).reshape(shape),
                              action=Action.from_vector(vector), position=(row, col)))
        offset += length
    return pairs


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def _stack(pairs: Sequence[DemoPair]) -> Tuple[np.ndarray, np.ndarray]:
    return (np.stack([pair.observation for pair in pairs]),
            np.stack([pair.action.to_vector() for pair in pairs]))


def bc_loss(params: PolicyParams, pairs: Sequence[DemoPair], batch_size: int = 256) -> float:
    """Mean squared error between the squashed policy mean and the demo actions."""
    if not pairs:
        raise ValueError("bc_loss needs at least one pair")
    observations, targets = _stack(pairs)
    total = 0.0
    for begin in range(0, len(pairs), batch_size):
        loc, _, _ = forward_batch(params, observations[begin:begin + batch_size])
        total += float(np.sum((expit(loc) - targets[begin:begin + batch_size]) ** 2))
    return total / targets.size


def train_bc(params: PolicyParams, pairs: Sequence[DemoPair], config: BCConfig,
             rng: np.random.Generator, steps: Optional[int] = None,
             holdout: Sequence[DemoPair] = ()) -> Tuple[PolicyParams, List[float]]:
    """Mini-batch Adam on the squashed-mean MSE.

    Returns the loss curve, starting with the loss before any update. When a holdout
    set is given the curve tracks the holdout loss instead of the training loss.
    """
    if not pairs:
        raise DemoConversionError("behavior cloning needs a nonempty dataset")
    observations, targets = _stack(pairs)
    optimizer = AdamOptimizer(learning_rate=config.learning_rate, max_grad_norm=config.max_grad_norm)
    monitored = list(holdout) if holdout else list(pairs)
    curve = [bc_loss(params, monitored)]
    count = len(pairs)
    epochs = config.epochs if steps is None else int(math.ceil(steps / math.ceil(count / config.batch_size)))
    taken = 0
    for epoch in range(epochs):
        order = rng.permutation(count)
        for begin in range(0, count, config.batch_size):
            if steps is not None and taken >= steps:
                break
            idx = order[begin:begin + config.batch_size]
            loc, value, cache = forward_batch(params, observations[idx])
            mean = expit(loc)
            grad_loc = 2.0 * (mean - targets[idx]) * mean * (1.0 - mean) / targets[idx].size
            grads = backward(params, cache, grad_loc, np.zeros_like(value))
            params = optimizer.step(params, grads, frozen=("v_w", "v_b", "log_std"))
            taken += 1
        curve.append(bc_loss(params, monitored))
        logger.debug(f"bc epoch {epoch + 1}: loss {curve[-1]:.6f}")
    return params, curve


def init_rl_from_bc(bc_params: PolicyParams, spec: Optional[NetworkSpec] = None,
                    rng: Optional[np.random.Generator] = None) -> PolicyParams:
    """Copy trunk and policy head; fresh value head; log-std reset to init_log_std."""
    spec = spec or bc_params.spec
    check_topology(bc_params, spec)
    rng = rng or np.random.default_rng(0)
    arrays = {name: bc_params.arrays[name].copy() for name in TRUNK_AND_POLICY}
    arrays.update(init_value_head(spec, rng))
    arrays["log_std"] = np.full(len(bc_params.arrays["log_std"]), spec.init_log_std)
    return PolicyParams(spec=spec, arrays=arrays)


def glyph_pairs(documents: Dict[str, str], config: BrushConfig, size: int, w_demo: float = 0.5
                ) -> Tuple[Dict[str, List[DemoPair]], List[str]]:
    """Pairs per glyph; glyphs that fail to parse or convert are reported and skipped."""
    out: Dict[str, List[DemoPair]] = {}
    failures: List[str] = []
    for name in sorted(documents):
        document = documents[name]
        try:
            strokes = parse_svg_strokes(document, scale=glyph_scale(document, size))
            pairs = strokes_to_pairs(strokes, config, (size, size, 1), w_demo)
        except (SvgParseError, DemoConversionError, ValueError) as e:
            logger.warning(f"Skipping glyph {name}: {e}")
            failures.append(f"{name}: {e}")
            continue
        if not pairs:
            logger.warning(f"Skipping glyph {name}: no strokes")
            failures.append(f"{name}: no strokes")
            continue
        out[name] = pairs
    return out, failures


def pairs_to_stroke_record(pairs: Sequence[DemoPair]) -> StrokeRecord:
    """One record replaying the whole demo, pen-up transits included."""
    return StrokeRecord(start=pairs[0].position, actions=[pair.action for pair in pairs])


def imitate_glyph(params: PolicyParams, reference: Canvas, start: Tuple[float, float], steps: int,
                  config: BrushConfig, pen_up_width: float = 0.0) -> Canvas:
    """Closed-loop replay of the policy's mean actions from the demo's start position."""
    canvas = blank_canvas(*reference.shape, background=config.background)
    brush = BrushState(position=start)
    for _ in range(steps):
        dist, _ = forward(params, extract_observation(canvas, reference, brush, config.window))
        canvas, brush = render_action(canvas, brush, to_action(dist.mean, pen_up_width), config)
    return canvas
