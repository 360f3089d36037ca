import numpy as np
import pytest

from canvas import Action, BrushConfig, BrushState, blank_canvas, extract_observation, render_action
from errors import DemoConversionError, SvgParseError
from glyph_fixtures import glyph_document, glyph_documents, glyph_strokes
from learn_bc import (BCConfig, DemoPair, StrokePolyline, action_towards, bc_loss, emit_path_data, glyph_pairs,
                      glyph_scale, init_rl_from_bc, pairs_from_trace, parse_path_data, parse_svg_strokes,
                      rasterize_strokes, read_demo_dataset, replay_pairs, resample_polyline, split_dataset,
                      strokes_to_pairs, train_bc, write_demo_dataset)
from learn_rl import CurriculumState, PaintingEnv, collect_episode
from objective import loss_half
from policy_net import forward
from tests.conftest import disk_reference

DESK_BRUSH = BrushConfig(window_h=36, window_w=36, l_max=8.0, w_max=3.0)


def test_single_line():
    strokes = parse_path_data("M 0 0 L 30 0")
    assert len(strokes) == 1
    assert strokes[0].points == [(0.0, 0.0), (30.0, 0.0)]


def test_empty_path_has_no_strokes():
    assert parse_path_data("") == []
    assert parse_svg_strokes('<svg xmlns="http://www.w3.org/2000/svg"><path d=""/></svg>') == []


def test_straight_cubic_stays_on_the_chord():
    points = np.array(parse_path_data("M 0 0 C 10 0 20 0 30 0")[0].points)
    assert points[0] == pytest.approx((0.0, 0.0))
    assert points[-1] == pytest.approx((30.0, 0.0))
    assert np.max(np.abs(points[:, 1])) <= 1e-6


def test_curved_cubic_is_flattened_onto_the_curve():
    points = np.array(parse_path_data("M 0 0 C 0 30 30 30 30 0", tolerance=0.1)[0].points)
    assert len(points) > 4
    assert points[-1] == pytest.approx((30.0, 0.0))
    # y(t) = 90 t (1 - t) peaks at the first subdivision point
    assert np.all(np.diff(points[:, 0]) > 0.0)
    assert np.max(points[:, 1]) == pytest.approx(22.5)


def test_backtracking_cubic_on_its_chord_line_keeps_the_detour():
    # x(t) = 120t - 270t^2 + 180t^3 runs out to 16.67, back to 13.33, then on to 30
    points = np.array(parse_path_data("M 0 0 C 40 0 -10 0 30 0", tolerance=0.1)[0].points)
    assert np.max(np.abs(points[:, 1])) <= 1e-9
    assert np.max(points[:, 0]) == pytest.approx(30.0)
    assert np.max(points[:-1, 0]) >= 16.5
    assert np.any(np.diff(points[:, 0]) < 0.0)


def test_relative_commands_and_close():
    strokes = parse_path_data("m 10 10 l 5 0 h 5 v 5 z")
    assert strokes[0].points == [(10.0, 10.0), (15.0, 10.0), (20.0, 10.0), (20.0, 15.0), (10.0, 10.0)]


def test_implicit_lineto_after_moveto():
    assert parse_path_data("M 0 0 10 0 10 10")[0].points == [(0.0, 0.0), (10.0, 0.0), (10.0, 10.0)]


def test_each_subpath_is_a_stroke():
    strokes = parse_path_data("M 0 0 L 5 0 M 10 10 L 20 10")
    assert [s.index for s in strokes] == [0, 1]
    assert strokes[1].points[0] == (10.0, 10.0)


def test_smooth_cubic_reflects_the_control_point():
    points = parse_path_data("M 0 0 C 0 10 10 10 10 0 S 20 -10 20 0")[0].points
    assert points[-1] == pytest.approx((20.0, 0.0))
    assert min(y for _, y in points) < -5.0


@pytest.mark.parametrize("data, offset", [
    ("M 0 0 L 10 #", 11),
    ("M 0 0 Q 1 1 2 2", 6),
    ("M 0 0 L 10", 6),
    ("5 5", 0),
])
def test_malformed_path_names_the_offset(data, offset):
    with pytest.raises(SvgParseError) as info:
        parse_path_data(data)
    assert info.value.offset == offset


def test_malformed_document():
    with pytest.raises(SvgParseError):
        parse_svg_strokes("<svg><path d='M 0 0 L 1 1'></svg>")


def test_fixture_glyph_yields_one_stroke_per_path():
    strokes = parse_svg_strokes(glyph_document(3))
    assert len(strokes) == len(glyph_strokes(3))
    assert [s.index for s in strokes] == list(range(len(strokes)))


def test_emitted_path_data_parses_back_exactly():
    strokes = parse_svg_strokes(glyph_document(0), scale=64 / 109)
    again = parse_path_data(emit_path_data(strokes))
    assert [s.points for s in again] == [s.points for s in strokes]


def test_glyph_scale_reads_the_viewbox():
    assert glyph_scale(glyph_document(0), 64) == pytest.approx(64 / 109)


def test_resample_keeps_endpoints_and_spacing():
    points = np.array([[0.0, 0.0], [0.0, 7.0], [9.0, 7.0]])
    resampled = resample_polyline(points, 4.0)
    assert np.allclose(resampled[0], points[0]) and np.allclose(resampled[-1], points[-1])
    steps = np.linalg.norm(np.diff(resampled, axis=0), axis=1)
    assert np.all(steps <= 4.0 + 1e-9)
    assert len(resampled) == 5


def test_straight_stroke_becomes_full_reach_actions(brush_config):
    stroke = StrokePolyline(points=[(5.0, 2.0), (5.0, 32.0)])
    pairs = strokes_to_pairs([stroke], brush_config, (40, 40, 1))
    assert len(pairs) == 3
    for pair in pairs:
        assert pair.action.alpha == pytest.approx(0.0, abs=1e-9)
        assert pair.action.length == pytest.approx(1.0)
        assert pair.action.width == 0.5
        assert pair.observation.shape == (2, 36, 36)


def test_two_strokes_have_one_pen_up_between(brush_config):
    first = StrokePolyline(points=[(5.0, 2.0), (5.0, 22.0)], index=0)
    second = StrokePolyline(points=[(12.0, 22.0), (12.0, 32.0)], index=1)
    pairs = strokes_to_pairs([first, second], brush_config, (40, 40, 1))
    widths = [pair.action.width for pair in pairs]
    assert widths == [0.5, 0.5, 0.0, 0.5]


def _glyph_demo(index, size=64):
    document = glyph_document(index)
    strokes = parse_svg_strokes(document, scale=glyph_scale(document, size))
    reference = rasterize_strokes(strokes, (size, size, 1), DESK_BRUSH, 0.5)
    return reference, strokes_to_pairs(strokes, DESK_BRUSH, (size, size, 1), 0.5, reference)


@pytest.mark.parametrize("index", range(10))
def test_pairs_replay_onto_the_reference(index):
    reference, pairs = _glyph_demo(index)
    replayed = replay_pairs(pairs, reference.shape, DESK_BRUSH)
    assert loss_half(replayed, reference) <= 0.01


@pytest.mark.parametrize("index", [0, 3, 7])
def test_recorded_observations_match_a_replay(index):
    reference, pairs = _glyph_demo(index)
    canvas = blank_canvas(*reference.shape)
    brush = BrushState(position=pairs[0].position)
    for pair in pairs:
        assert brush.position == pair.position
        window = extract_observation(canvas, reference, brush, DESK_BRUSH.window).stacked()
        assert np.array_equal(window, pair.observation)
        canvas, brush = render_action(canvas, brush, pair.action, DESK_BRUSH)
    assert np.array_equal(canvas, replay_pairs(pairs, reference.shape, DESK_BRUSH))


def test_action_beyond_reach_is_an_error(brush_config):
    with pytest.raises(DemoConversionError):
        action_towards((0.0, 0.0), (0.0, 10.5), 0.5, brush_config)
    assert action_towards((0.0, 0.0), (0.0, 5.0), 0.5, brush_config).alpha == pytest.approx(0.25)


def test_demo_dataset_round_trip(tmp_path, brush_config):
    stroke = StrokePolyline(points=[(5.0, 2.0), (5.0, 32.0)])
    pairs = strokes_to_pairs([stroke], brush_config, (40, 40, 1))
    write_demo_dataset(tmp_path / "demos.bin", pairs, {"glyphs": ["line"]})
    loaded = read_demo_dataset(tmp_path / "demos.bin")
    assert len(loaded) == len(pairs)
    for original, copy in zip(pairs, loaded):
        assert copy.position == original.position
        assert copy.action == original.action
        assert np.array_equal(copy.observation, original.observation.astype(np.float32).astype(np.float64))
    assert '"glyphs"' in (tmp_path / "demos.bin.json").read_text()


def test_corrupt_dataset_is_rejected(tmp_path, brush_config):
    pairs = strokes_to_pairs([StrokePolyline(points=[(5.0, 2.0), (5.0, 12.0)])], brush_config, (40, 40, 1))
    write_demo_dataset(tmp_path / "demos.bin", pairs)
    data = (tmp_path / "demos.bin").read_bytes()
    (tmp_path / "demos.bin").write_bytes(b"XXXX" + data[4:])
    with pytest.raises(DemoConversionError):
        read_demo_dataset(tmp_path / "demos.bin")


def _single_pair(brush_config):
    pair = strokes_to_pairs([StrokePolyline(points=[(5.0, 2.0), (5.0, 12.0)])], brush_config, (40, 40, 1))[0]
    return DemoPair(observation=pair.observation, position=pair.position,
                    action=Action(alpha=0.3, length=0.8, width=0.5, color=(0.2, 0.2, 0.2)))


def test_single_pair_is_overfit(desk_params, brush_config):
    _, curve = train_bc(desk_params, [_single_pair(brush_config)], BCConfig(learning_rate=1e-3),
                        np.random.default_rng(0), steps=500)
    assert len(curve) == 501
    assert curve[-1] < 0.01 * curve[0]


def test_learning_rate_zero_keeps_the_loss(desk_params, brush_config):
    _, curve = train_bc(desk_params, [_single_pair(brush_config)], BCConfig(learning_rate=0.0, epochs=5),
                        np.random.default_rng(0))
    assert curve == [curve[0]] * 6


def test_duplicated_dataset_has_the_same_full_batch_curve(desk_params):
    document = glyph_document(1)
    strokes = parse_svg_strokes(document, scale=glyph_scale(document, 64))
    pairs = strokes_to_pairs(strokes, DESK_BRUSH, (64, 64, 1))
    assert len(pairs) >= 2
    config = BCConfig(learning_rate=1e-3, epochs=3, batch_size=512)
    _, single = train_bc(desk_params, pairs, config, np.random.default_rng(0))
    _, doubled = train_bc(desk_params, pairs + pairs, config, np.random.default_rng(0))
    assert np.allclose(single, doubled, atol=1e-6, rtol=0.0)


def test_value_head_and_log_std_are_not_trained(desk_params, brush_config):
    params, _ = train_bc(desk_params, [_single_pair(brush_config)], BCConfig(epochs=3), np.random.default_rng(0))
    for name in ("v_w", "v_b", "log_std"):
        assert np.array_equal(params.arrays[name], desk_params.arrays[name])


def test_holdout_curve_tracks_holdout_loss(desk_params):
    pairs = strokes_to_pairs(parse_svg_strokes(glyph_document(2), scale=64 / 109), DESK_BRUSH, (64, 64, 1))
    train, holdout = split_dataset(pairs, 0.25, np.random.default_rng(0))
    assert len(train) + len(holdout) == len(pairs) and holdout
    _, curve = train_bc(desk_params, train, BCConfig(epochs=1), np.random.default_rng(0), holdout=holdout)
    assert curve[0] == bc_loss(desk_params, holdout)


def test_rl_init_copies_the_policy_head(desk_params, rng):
    trained = desk_params.copy()
    trained.arrays["pi_b"] = rng.normal(size=6)
    trained.arrays["log_std"] = np.full(6, -2.0)
    rl = init_rl_from_bc(trained, rng=np.random.default_rng(1))
    for x in rng.uniform(size=(4, 2, 36, 36)):
        assert np.array_equal(forward(rl, x)[0].mean, forward(trained, x)[0].mean)
    assert np.all(rl.arrays["log_std"] == trained.spec.init_log_std)


def test_pairs_from_trace_follow_the_brush(desk_params, brush_config):
    env = PaintingEnv(disk_reference(), brush_config)
    trace = collect_episode(desk_params, env, "disk", CurriculumState(horizon=4, r_thresh=10.0),
                            np.random.default_rng(0))
    pairs = pairs_from_trace(trace, brush_config)
    assert len(pairs) == len(trace)
    assert pairs[0].position == trace.start
    assert all(np.array_equal(p.observation, o) for p, o in zip(pairs, trace.observations))


def test_glyph_pairs_report_broken_glyphs():
    documents = glyph_documents(3)
    documents["broken"] = '<svg xmlns="http://www.w3.org/2000/svg"><path d="M 0 0 Q 1 1 2 2"/></svg>'
    documents["empty"] = '<svg xmlns="http://www.w3.org/2000/svg"/>'
    per_glyph, failures = glyph_pairs(documents, DESK_BRUSH, 64)
    assert sorted(per_glyph) == sorted(glyph_documents(3))
    assert len(failures) == 2
