import math

import numpy as np
import pytest

from canvas import (Action, BrushConfig, BrushState, StrokeRecord, blank_canvas, check_action_vector,
                    extract_observation, load_image, render_action, replay_strokes, save_image,
                    stamp_polyline, update_position)
from errors import InvalidActionError, ShapeMismatchError


def test_pen_up_leaves_canvas_untouched_and_moves(blank, brush_config):
    brush = BrushState(position=(10.0, 10.0))
    action = Action(alpha=0.3, length=0.7, width=0.0)
    painted, moved = render_action(blank, brush, action, brush_config)
    assert np.array_equal(painted, blank)
    assert moved.position != brush.position
    assert not moved.pen_down


def test_zero_length_stroke_is_a_single_dab(blank, brush_config):
    brush = BrushState(position=(16.0, 16.0))
    painted, moved = render_action(blank, brush, Action(alpha=0.0, length=0.0, width=0.5), brush_config)
    assert moved.position == (16.0, 16.0)
    assert painted[16, 16, 0] == 0.0
    assert painted[0, 0, 0] == 1.0
    # radius 1.5 dab: nothing beyond two pixels from the center
    touched = np.argwhere(painted[:, :, 0] < 1.0)
    assert np.max(np.abs(touched - 16)) <= 2


def test_quarter_turn_moves_along_columns():
    config = BrushConfig(window_h=200, window_w=200, l_max=100.0)
    canvas = blank_canvas(64, 64)
    _, moved = render_action(canvas, BrushState(position=(0.0, 0.0)),
                             Action(alpha=0.25, length=0.1, width=0.0), config)
    assert moved.position[0] == pytest.approx(0.0, abs=1e-12)
    assert moved.position[1] == pytest.approx(10.0)


@pytest.mark.parametrize("start, alpha, length, expected", [
    ((50.0, 50.0), 0.0, 0.0, (50.0, 50.0)),
    ((50.0, 50.0), 0.0, 1.0, (60.0, 50.0)),
    ((0.0, 0.0), 0.5, 1.0, (-10.0, 0.0)),
])
def test_update_position(start, alpha, length, expected):
    config = BrushConfig(window_h=20, window_w=20, l_max=10.0)
    moved = update_position(BrushState(position=start), Action(alpha=alpha, length=length, width=0.0), config)
    assert moved.position[0] == pytest.approx(expected[0], abs=1e-9)
    assert moved.position[1] == pytest.approx(expected[1], abs=1e-9)


def test_position_is_not_clipped_to_the_canvas(brush_config):
    brush = BrushState(position=(1.0, 1.0))
    canvas = blank_canvas(8, 8)
    for _ in range(5):
        canvas, brush = render_action(canvas, brush, Action(alpha=0.5, length=1.0, width=1.0), brush_config)
    assert brush.position[0] < -40.0
    assert canvas.min() >= 0.0 and canvas.max() <= 1.0


@pytest.mark.parametrize("vector", [
    [0.1, 0.2, 0.3, 0.0, 0.0],
    [0.1, 0.2, math.nan, 0.0, 0.0, 0.0],
    [0.1, 1.2, 0.3, 0.0, 0.0, 0.0],
    [-0.1, 0.2, 0.3, 0.0, 0.0, 0.0],
])
def test_invalid_action_vectors_are_rejected(vector):
    with pytest.raises(InvalidActionError):
        check_action_vector(vector)


@pytest.mark.parametrize("fields", [
    {"alpha": math.nan, "length": 0.2, "width": 0.3},
    {"alpha": 0.1, "length": 0.2, "width": 1.5},
    {"alpha": 0.1, "length": 0.2, "width": 0.3, "color": (0.0, math.inf, 0.0)},
])
def test_action_model_rejects_bad_components(fields):
    with pytest.raises(InvalidActionError):
        Action(**fields)


def test_render_is_deterministic(brush_config):
    canvas = blank_canvas(32, 32, 3)
    action = Action(alpha=0.13, length=0.8, width=0.6, color=(0.2, 0.5, 0.9))
    first = render_action(canvas, BrushState(position=(9.5, 12.25)), action, brush_config)
    second = render_action(canvas, BrushState(position=(9.5, 12.25)), action, brush_config)
    assert np.array_equal(first[0], second[0])
    assert first[1] == second[1]


def test_gray_canvas_uses_mean_ink():
    config = BrushConfig(window_h=8, window_w=8, l_max=4.0, w_max=2.0)
    painted, _ = render_action(blank_canvas(8, 8, 1), BrushState(position=(4.0, 4.0)),
                               Action(alpha=0.0, length=0.0, width=1.0, color=(0.3, 0.6, 0.9)), config)
    assert painted[4, 4, 0] == pytest.approx(0.6)


def test_window_matching_canvas_size_crops_full_images(rng):
    canvas = rng.uniform(size=(36, 36, 1))
    reference = rng.uniform(size=(36, 36, 1))
    obs = extract_observation(canvas, reference, BrushState(position=(18.0, 18.0)), (36, 36))
    assert np.array_equal(obs.canvas_window, canvas)
    assert np.array_equal(obs.reference_window, reference)


def test_corner_position_pads_with_zeros():
    canvas = np.ones((100, 100, 1))
    obs = extract_observation(canvas, canvas, BrushState(position=(0.0, 0.0)), (84, 84))
    assert obs.canvas_window.shape == (84, 84, 1)
    assert np.all(obs.canvas_window[:42, :42] == 0.0)
    assert np.all(obs.canvas_window[42:, 42:] == 1.0)


def test_identical_images_give_identical_windows(rng):
    image = rng.uniform(size=(40, 40, 3))
    obs = extract_observation(image, image.copy(), BrushState(position=(5.3, 30.9)), (36, 36))
    assert np.array_equal(obs.canvas_window, obs.reference_window)
    assert obs.stacked().shape == (6, 36, 36)


def test_observation_rejects_mismatched_shapes():
    with pytest.raises(ShapeMismatchError):
        extract_observation(np.ones((8, 8, 1)), np.ones((8, 9, 1)), BrushState(position=(0.0, 0.0)), (4, 4))


def test_replay_strokes_matches_manual_render(blank, brush_config):
    actions = [Action(alpha=0.1, length=0.5, width=0.4), Action(alpha=0.6, length=0.9, width=0.0),
               Action(alpha=0.9, length=0.7, width=0.8)]
    canvas, brush = blank, BrushState(position=(12.0, 20.0))
    for action in actions:
        canvas, brush = render_action(canvas, brush, action, brush_config)
    replayed = replay_strokes(blank, [StrokeRecord(start=(12.0, 20.0), actions=actions)], brush_config)
    assert np.array_equal(canvas, replayed)


def test_stamp_polyline_returns_new_canvas(blank, brush_config):
    out = stamp_polyline(blank, [(4.0, 4.0), (4.0, 28.0)], 1.5, (0.0, 0.0, 0.0), brush_config)
    assert blank.min() == 1.0
    assert out[4, 16, 0] == 0.0


def test_png_round_trip_quantizes_to_8_bits(tmp_path, rng):
    canvas = rng.uniform(size=(10, 12, 3))
    save_image(tmp_path / "image.png", canvas)
    loaded = load_image(tmp_path / "image.png")
    assert loaded.shape == (10, 12, 3)
    assert np.max(np.abs(loaded - canvas)) <= 0.5 / 255.0 + 1e-12


def test_pgm_loads_as_single_channel(tmp_path):
    canvas = np.linspace(0.0, 1.0, 64).reshape(8, 8, 1)
    save_image(tmp_path / "image.pgm", canvas)
    assert load_image(tmp_path / "image.pgm").shape == (8, 8, 1)


def _distance_to_segment(rows, cols, start, end):
    start, end = np.asarray(start), np.asarray(end)
    delta = end - start
    points = np.stack([rows, cols], axis=-1) - start
    denom = float(delta @ delta)
    t = np.clip(points @ delta / denom, 0.0, 1.0) if denom > 0.0 else np.zeros(rows.shape)
    return np.linalg.norm(points - t[..., None] * delta, axis=-1)


def test_render_only_touches_pixels_near_the_segment(brush_config):
    rng = np.random.default_rng(99)
    rows, cols = np.mgrid[0:40, 0:40].astype(np.float64)
    for _ in range(60):
        canvas = rng.uniform(size=(40, 40, 1))
        brush = BrushState(position=tuple(rng.uniform(-5.0, 45.0, size=2)))
        action = Action.from_vector(rng.uniform(size=6))
        painted, moved = render_action(canvas, brush, action, brush_config)
        radius = brush_config.w_max * action.width
        far = _distance_to_segment(rows, cols, brush.position, moved.position) > radius + 0.5 + 1e-9
        assert np.array_equal(painted[far], canvas[far])
