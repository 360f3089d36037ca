"""
Sim-to-real transfer for a 3-DoF pen robot.

Painting-plane points (canvas row, col) are lifted to robot coordinates with a
fitted 3x3 projection on homogeneous input. Stroke width becomes pressure, the
depth below first contact, through a monotone mapping calibrated against a
deformable-brush simulator: the saturation pressure is found from deformation
probes, then the usable pressure range is bisected and every midpoint render
adds a (width, pressure) sample to the mapping.
"""
import csv
import hashlib
import json
import logging
import math
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, PrivateAttr, model_validator
from scipy.optimize import minimize_scalar

from canvas import BrushConfig, BrushState, Canvas, StrokeRecord, blank_canvas, stamp_segment, update_position
from errors import CalibrationError, NoKneeError, ProjectionError

logger = logging.getLogger(__name__)

TRAJECTORY_COLUMNS = ("index", "x_mm", "y_mm", "z_mm", "pressure", "pen_down")


class ProjectionTransform(BaseModel):
    """Maps homogeneous painting-plane (row, col, 1) to robot (x, y, z)."""
    matrix: List[List[float]]
    residual: float = 0.0

    @model_validator(mode="after")
    def _check_matrix(self):
        array = np.asarray(self.matrix, dtype=np.float64)
        if array.shape != (3, 3) or not np.all(np.isfinite(array)):
            raise ValueError("projection must be a finite 3x3 matrix")
        return self

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.matrix, dtype=np.float64)

    @classmethod
    def identity(cls) -> "ProjectionTransform":
        return cls(matrix=[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 0.0]])


class BrushSimulator(BaseModel):
    """Deformable brush: width w(p) = w_max * min(p / p_sat, 1)^kappa plus Gaussian readout noise.

    The end-effector deformation readout rises linearly up to p_sat and stays flat
    beyond it.
    """
    p_sat: float = Field(default=0.6, gt=0.0)
    kappa: float = Field(default=1.0, gt=0.0)
    w_max: float = Field(default=1.0, gt=0.0)
    deformation_max: float = Field(default=1.0, gt=0.0)
    noise_sigma: float = Field(default=0.0, ge=0.0)
    seed: int = 0

    _rng: np.random.Generator = PrivateAttr()
    _width_calls: int = PrivateAttr(default=0)
    _deformation_calls: int = PrivateAttr(default=0)

    def model_post_init(self, __context) -> None:
        self._rng = np.random.default_rng(self.seed)

    @property
    def width_calls(self) -> int:
        return self._width_calls

    @property
    def deformation_calls(self) -> int:
        return self._deformation_calls

    def width_curve(self, pressure: float) -> float:
        return self.w_max * min(max(pressure, 0.0) / self.p_sat, 1.0) ** self.kappa

    def width(self, pressure: float) -> float:
        """Render a test stroke at `pressure` and measure its width."""
        self._width_calls += 1
        noise = self._rng.normal(0.0, self.noise_sigma) if self.noise_sigma > 0.0 else 0.0
        return self.width_curve(pressure) + noise

    def deformation(self, pressure: float) -> float:
        self._deformation_calls += 1
        noise = self._rng.normal(0.0, self.noise_sigma) if self.noise_sigma > 0.0 else 0.0
        return self.deformation_max * min(max(pressure, 0.0) / self.p_sat, 1.0) + noise


class PressureMapping(BaseModel):
    """Monotone piecewise-linear map from stroke width to pressure."""
    widths: List[float]
    pressures: List[float]
    a_min: float
    a_max: float
    samples: List[Tuple[float, float]] = Field(default_factory=list)

    @model_validator(mode="after")
    def _check_monotone(self):
        if len(self.widths) != len(self.pressures) or not self.widths:
            raise ValueError("mapping needs matching, nonempty width and pressure tables")
        if np.any(np.diff(self.widths) <= 0.0):
            raise ValueError("mapping widths must be strictly increasing")
        if np.any(np.diff(self.pressures) < 0.0):
            raise ValueError("mapping pressures must be nondecreasing")
        return self

    @property
    def domain(self) -> Tuple[float, float]:
        return self.widths[0], self.widths[-1]

    def pressure(self, width: float) -> Tuple[float, bool]:
        """(pressure, clamped): widths outside the calibrated domain clamp to its ends."""
        low, high = self.domain
        clamped = width < low or width > high
        value = float(np.interp(min(max(width, low), high), self.widths, self.pressures))
        return min(max(value, self.a_min), self.a_max), clamped

    def __call__(self, width: float) -> float:
        return self.pressure(width)[0]


class CalibrationResult(BaseModel):
    mapping: PressureMapping
    p_sat: Optional[float]
    probes: List[Tuple[float, float]]
    knee_residual: Optional[float]
    width_calls: int
    deformation_calls: int


class StrokeStyle(BaseModel):
    """Per-segment Gaussian width model."""
    model_config = ConfigDict(extra="forbid")

    mean: float = 0.5
    sigma: float = Field(default=0.3, ge=0.0)
    clamp_min: float = Field(default=0.0, ge=0.0, le=1.0)
    clamp_max: float = Field(default=1.0, ge=0.0, le=1.0)
    position_sigma: float = Field(default=0.0, ge=0.0)
    tilt: float = Field(default=0.0, ge=0.0, le=1.0)

    @model_validator(mode="after")
    def _check_bounds(self):
        if self.clamp_min > self.clamp_max:
            raise ValueError("clamp_min must not exceed clamp_max")
        return self


class StyledSegment(BaseModel):
    point: Tuple[float, float]
    raw_width: float
    width: float


class Waypoint(BaseModel):
    index: int
    x_mm: float
    y_mm: float
    z_mm: float
    pressure: float
    pen_down: bool


class Trajectory(BaseModel):
    waypoints: List[Waypoint] = Field(default_factory=list)
    clamped_widths: int = 0
    checksum: str = ""
    travel_height: float = 5.0


# ---------------------------------------------------------------------------
# Projection
# ---------------------------------------------------------------------------

def fit_projection(correspondences: Sequence[Tuple[Sequence[float], Sequence[float]]]) -> ProjectionTransform:
    """Least-squares 3x3 fit of (row, col, 1) -> (x, y, z)."""
    if len(correspondences) < 3:
        raise ProjectionError(f"need at least 3 correspondences, got {len(correspondences)}")
    plane = np.array([[p[0], p[1], 1.0] for p, _ in correspondences], dtype=np.float64)
    robot = np.array([q for _, q in correspondences], dtype=np.float64)
    if robot.shape[1] != 3 or not np.all(np.isfinite(plane)) or not np.all(np.isfinite(robot)):
        raise ProjectionError("correspondences must pair finite 2D and 3D points")
    singular = np.linalg.svd(plane, compute_uv=False)
    if singular[-1] <= 1e-12 * max(singular[0], 1.0):
        raise ProjectionError("painting-plane points are collinear")
    solution, _, _, _ = np.linalg.lstsq(plane, robot, rcond=None)
    errors = plane @ solution - robot
    residual = float(np.sqrt(np.mean(np.sum(errors ** 2, axis=1))))
    return ProjectionTransform(matrix=solution.T.tolist(), residual=residual)


def apply_projection(transform: ProjectionTransform, point: Sequence[float]) -> np.ndarray:
    """(2,) -> (3,) or (N, 2) -> (N, 3)."""
    points = np.asarray(point, dtype=np.float64)
    homogeneous = np.concatenate([points, np.ones(points.shape[:-1] + (1,))], axis=-1)
    return homogeneous @ transform.array.T


def invert_projection(transform: ProjectionTransform, point: Sequence[float]) -> np.ndarray:
    matrix = transform.array
    target = np.asarray(point, dtype=np.float64) - matrix[:, 2]
    solution, _, rank, _ = np.linalg.lstsq(matrix[:, :2], target, rcond=None)
    if rank < 2:
        raise ProjectionError("projection does not span the painting plane")
    return solution


# ---------------------------------------------------------------------------
# Pressure calibration
# ---------------------------------------------------------------------------

def _hinge_fit(pressures: np.ndarray, values: np.ndarray, knee: float) -> Tuple[float, np.ndarray]:
    design = np.stack([np.ones_like(pressures), np.minimum(pressures, knee)], axis=1)
    coef, _, _, _ = np.linalg.lstsq(design, values, rcond=None)
    return float(np.sum((design @ coef - values) ** 2)), coef


def estimate_pressure_limit(samples: Sequence[Tuple[float, float]]) -> Tuple[float, float]:
    """Breakpoint of the rising-then-flat fit to (pressure, deformation) samples.

    Returns (p_sat, rms residual). Raises NoKneeError when the data do not show
    both regimes.
    """
    data = np.asarray(samples, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] < 4:
        raise NoKneeError("knee detection needs at least 4 samples")
    pressures, values = data[:, 0], data[:, 1]
    if np.any(np.diff(pressures) <= 0.0):
        raise NoKneeError("probe pressures must be strictly increasing")

    # both regimes must hold at least two samples
    candidates = pressures[1:-1]
    errors = [_hinge_fit(pressures, values, knee)[0] for knee in candidates]
    best = int(np.argmin(errors))
    low = candidates[max(best - 1, 0)]
    high = candidates[min(best + 1, len(candidates) - 1)]
    knee, sse = float(candidates[best]), float(errors[best])
    if high > low:
        refined = minimize_scalar(lambda k: _hinge_fit(pressures, values, k)[0],
                                  bounds=(low, high), method="bounded", options={"xatol": 1e-10})
        if refined.success and refined.fun < sse:
            knee, sse = float(refined.x), float(refined.fun)

    _, coef = _hinge_fit(pressures, values, knee)
    linear = np.stack([np.ones_like(pressures), pressures], axis=1)
    linear_sse = float(np.sum((linear @ np.linalg.lstsq(linear, values, rcond=None)[0] - values) ** 2))
    residual = math.sqrt(sse / len(pressures))
    rise = float(coef[1]) * (knee - pressures[0])
    if float(np.ptp(values)) <= 1e-12 or rise <= 3.0 * residual:
        raise NoKneeError("deformation does not rise before saturating", details={"rise": rise})
    if sse >= 0.5 * linear_sse:
        raise NoKneeError("deformation never saturates in the probed range",
                          details={"hinge_sse": sse, "linear_sse": linear_sse})
    return knee, residual


def _pool_adjacent_violators(values: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Weighted nondecreasing least-squares fit."""
    blocks: List[List[float]] = []
    for value, weight in zip(values, weights):
        blocks.append([float(value), float(weight), 1])
        while len(blocks) > 1 and blocks[-2][0] > blocks[-1][0]:
            v2, w2, n2 = blocks.pop()
            v1, w1, n1 = blocks.pop()
            blocks.append([(v1 * w1 + v2 * w2) / (w1 + w2), w1 + w2, n1 + n2])
    return np.concatenate([np.full(n, v) for v, _, n in blocks])


def build_mapping(samples: Sequence[Tuple[float, float]], a_min: float, a_max: float,
                  w_max: float) -> PressureMapping:
    """Interpolation table over the measured widths, made monotone with a weighted PAVA fit.

    Samples that measured exactly the same width share one entry at their median pressure.
    """
    if not samples:
        return PressureMapping(widths=[0.0, w_max], pressures=[a_min, a_max], a_min=a_min, a_max=a_max)
    table = np.asarray(samples, dtype=np.float64)
    widths, groups, counts = np.unique(table[:, 0], return_inverse=True, return_counts=True)
    pressures = np.array([np.median(table[groups.reshape(-1) == k, 1]) for k in range(len(widths))])
    fitted = _pool_adjacent_violators(pressures, counts.astype(np.float64))
    if len(widths) == 1:
        widths = np.array([widths[0], np.nextafter(widths[0], np.inf)])
        fitted = np.array([fitted[0], fitted[0]])
    return PressureMapping(widths=widths.tolist(), pressures=fitted.tolist(), a_min=a_min, a_max=a_max,
                           samples=[(float(w), float(p)) for w, p in table])


def estimate_pressure_mapping(simulator: BrushSimulator, a_min: float, a_max: float, a_step: float,
                              one_sided: bool = False) -> PressureMapping:
    """Recursive bisection of [a_min, a_max]; every midpoint render adds a sample.

    Both halves are explored. `one_sided` keeps only the upper-half recursion.
    """
    if not a_min < a_max:
        raise CalibrationError(f"empty pressure interval [{a_min}, {a_max}]")
    if a_step <= 0.0:
        raise CalibrationError(f"a_step must be positive, got {a_step}")
    samples: List[Tuple[float, float]] = []

    def bisect(low: float, high: float) -> None:
        if high - low <= a_step:
            return
        guess = (low + high) / 2.0
        width = simulator.width(guess)
        if not math.isfinite(width):
            raise CalibrationError(f"renderer returned width {width} at pressure {guess}",
                                   details={"pressure": guess, "width": width, "samples": list(samples)})
        samples.append((width, guess))
        if not one_sided:
            bisect(low, guess)
        bisect(guess, high)

    bisect(a_min, a_max)
    logger.debug(f"Bisection collected {len(samples)} samples on [{a_min}, {a_max}]")
    return build_mapping(samples, a_min, a_max, simulator.w_max)


def calibrate_hybrid(simulator: BrushSimulator, a_min: float, a_max: float, a_step: float,
                     probe_count: int = 41, one_sided: bool = False) -> CalibrationResult:
    """Deformation probes locate p_sat, then bisection runs on [a_min, min(a_max, p_sat)]."""
    probes = [(float(p), simulator.deformation(float(p))) for p in np.linspace(a_min, a_max, probe_count)]
    try:
        p_sat, knee_residual = estimate_pressure_limit(probes)
    except NoKneeError as e:
        logger.warning(f"No saturation found ({e.message}); calibrating the full range")
        p_sat, knee_residual = None, None
    upper = min(a_max, p_sat) if p_sat is not None else a_max
    mapping = estimate_pressure_mapping(simulator, a_min, upper, a_step, one_sided)
    logger.info(f"Calibrated mapping with {len(mapping.widths)} points, p_sat={p_sat}, "
                f"{simulator.width_calls} renders")
    return CalibrationResult(mapping=mapping, p_sat=p_sat, probes=probes, knee_residual=knee_residual,
                             width_calls=simulator.width_calls, deformation_calls=simulator.deformation_calls)


def write_calibration_report(path: str | Path, result: CalibrationResult, transform: ProjectionTransform) -> None:
    report = {
        "p_sat": result.p_sat,
        "knee_residual": result.knee_residual,
        "probes": result.probes,
        "samples": result.mapping.samples,
        "mapping": {"widths": result.mapping.widths, "pressures": result.mapping.pressures,
                    "a_min": result.mapping.a_min, "a_max": result.mapping.a_max},
        "projection": {"matrix": transform.matrix, "residual": transform.residual},
        "width_calls": result.width_calls,
        "deformation_calls": result.deformation_calls,
        "checksum": calibration_checksum(result.mapping, transform),
    }
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True))


def load_calibration_report(path: str | Path) -> Tuple[PressureMapping, ProjectionTransform]:
    report = json.loads(Path(path).read_text())
    try:
        mapping = PressureMapping(**report["mapping"], samples=[tuple(s) for s in report.get("samples", [])])
        transform = ProjectionTransform(**report["projection"])
    except (KeyError, TypeError, ValueError) as e:
        raise CalibrationError(f"invalid calibration report {path}: {e}")
    return mapping, transform


def calibration_checksum(mapping: PressureMapping, transform: ProjectionTransform) -> str:
    payload = json.dumps({"widths": mapping.widths, "pressures": mapping.pressures,
                          "matrix": transform.matrix}, sort_keys=True)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Stylization and export
# ---------------------------------------------------------------------------

def stylize_stroke(points: Sequence[Sequence[float]], style: StrokeStyle,
                   rng: np.random.Generator) -> List[StyledSegment]:
    """One Gaussian width per segment of the polyline, clamped to the style bounds."""
    points = np.asarray(points, dtype=np.float64)
    count = max(len(points) - 1, 0)
    segments = []
    for k in range(count):
        raw = float(rng.normal(style.mean, style.sigma)) if style.sigma > 0.0 else style.mean
        along = k / max(count - 1, 1)
        width = min(max(raw * (1.0 - style.tilt * along), style.clamp_min), style.clamp_max)
        point = points[k]
        if style.position_sigma > 0.0:
            point = point + rng.normal(0.0, style.position_sigma, size=2)
        segments.append(StyledSegment(point=(float(point[0]), float(point[1])), raw_width=raw, width=width))
    return segments


def _stroke_positions(stroke: StrokeRecord, config: BrushConfig) -> List[Tuple[float, float]]:
    brush = BrushState(position=stroke.start)
    positions = [brush.position]
    for action in stroke.actions:
        brush = update_position(brush, action, config)
        positions.append(brush.position)
    return positions


def export_trajectory(strokes: Sequence[StrokeRecord], mapping: PressureMapping,
                      transform: ProjectionTransform, config: BrushConfig,
                      style: Optional[StrokeStyle] = None, rng: Optional[np.random.Generator] = None,
                      travel_height: float = 5.0) -> Trajectory:
    """Waypoints for every action: pen-down segments at mapped pressure, pen-up moves at travel height.

    z is the projected plane height minus pressure. A supplied style overrides the
    policy's widths; color is dropped.
    """
    rng = rng or np.random.default_rng(0)
    points: List[Tuple[np.ndarray, float, bool]] = []
    clamped = 0

    def lift(position):
        points.append((np.asarray(position, dtype=np.float64), 0.0, False))

    for stroke in strokes:
        positions = [np.asarray(p) for p in _stroke_positions(stroke, config)]
        styled = stylize_stroke(positions, style, rng) if style is not None else None
        if styled is not None:
            positions = [np.asarray(s.point) for s in styled] + positions[len(styled):]
        drawing = False
        for k, action in enumerate(stroke.actions):
            start, end = positions[k], positions[k + 1]
            if not action.pen_down:
                lift(start)
                lift(end)
                drawing = False
                continue
            width = styled[k].width if styled is not None else action.width
            pressure, was_clamped = mapping.pressure(width)
            clamped += int(was_clamped)
            if not drawing:
                if points and points[-1][2]:
                    lift(points[-1][0])
                    lift(start)
                points.append((start, pressure, True))
            points.append((end, pressure, True))
            drawing = True

    waypoints = []
    for index, (position, pressure, pen_down) in enumerate(points):
        x, y, z = apply_projection(transform, position)
        z = z - pressure if pen_down else z + travel_height
        waypoints.append(Waypoint(index=index, x_mm=float(x), y_mm=float(y), z_mm=float(z),
                                  pressure=pressure, pen_down=pen_down))
    if clamped:
        logger.warning(f"{clamped} widths fell outside the calibrated range and were clamped")
    return Trajectory(waypoints=waypoints, clamped_widths=clamped,
                      checksum=calibration_checksum(mapping, transform), travel_height=travel_height)


def write_trajectory_csv(path: str | Path, trajectory: Trajectory) -> None:
    with open(path, "w", newline="") as handle:
        handle.write(f"# calibration={trajectory.checksum}\n")
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(TRAJECTORY_COLUMNS)
        for point in trajectory.waypoints:
            writer.writerow([point.index, f"{point.x_mm:.6f}", f"{point.y_mm:.6f}", f"{point.z_mm:.6f}",
                             f"{point.pressure:.6f}", int(point.pen_down)])


def read_trajectory_csv(path: str | Path) -> Trajectory:
    with open(path, newline="") as handle:
        header = handle.readline().strip()
        if not header.startswith("# calibration="):
            raise CalibrationError(f"{path} has no calibration header")
        rows = list(csv.DictReader(handle))
    waypoints = [Waypoint(index=int(r["index"]), x_mm=float(r["x_mm"]), y_mm=float(r["y_mm"]),
                          z_mm=float(r["z_mm"]), pressure=float(r["pressure"]), pen_down=r["pen_down"] == "1")
                 for r in rows]
    return Trajectory(waypoints=waypoints, checksum=header.split("=", 1)[1])


def resimulate_trajectory(trajectory: Trajectory, transform: ProjectionTransform,
                          simulator: BrushSimulator, config: BrushConfig,
                          shape: Tuple[int, int, int]) -> Canvas:
    """Back-project waypoints, re-render widths through the simulator and paint them in black."""
    canvas = blank_canvas(*shape, background=config.background)
    previous: Optional[Tuple[np.ndarray, Waypoint]] = None
    for point in trajectory.waypoints:
        plane_z = point.z_mm + point.pressure if point.pen_down else point.z_mm - trajectory.travel_height
        position = invert_projection(transform, (point.x_mm, point.y_mm, plane_z))
        if point.pen_down and previous is not None and previous[1].pen_down:
            width = max(simulator.width(point.pressure), 0.0)
            stamp_segment(canvas, previous[0], position, config.w_max * width, (0.0, 0.0, 0.0), config.opacity)
        previous = (position, point)
    return canvas


def correspondences_from_pitch(pixel_pitch_mm: float, origin_mm: Sequence[float],
                               tilt_deg: float = 0.0) -> List[Tuple[Tuple[float, float], Tuple[float, float, float]]]:
    """Four synthetic plane->robot pairs for a plane tilted about the row axis."""
    tilt = math.radians(tilt_deg)
    ox, oy, oz = origin_mm
    pairs = []
    for row, col in ((0.0, 0.0), (100.0, 0.0), (0.0, 100.0), (100.0, 100.0)):
        x = ox + col * pixel_pitch_mm
        y = oy + row * pixel_pitch_mm * math.cos(tilt)
        z = oz + row * pixel_pitch_mm * math.sin(tilt)
        pairs.append(((row, col), (x, y, z)))
    return pairs


def trajectory_summary(trajectory: Trajectory) -> Dict[str, float]:
    down = sum(1 for w in trajectory.waypoints if w.pen_down)
    return {"waypoints": len(trajectory.waypoints), "pen_down": down,
            "pen_up": len(trajectory.waypoints) - down, "clamped_widths": trajectory.clamped_widths}
