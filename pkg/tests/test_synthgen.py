import os

import numpy as np
import pytest

from occlane.core import luma, polygon_mask, read_manifest
from occlane.synthgen import (
    LaneModel,
    Scene,
    SceneConfig,
    generate_corpus,
    generate_scene,
    rasterize_stripe,
    render_lane_mask,
    scene_config_from_dict,
    scene_config_to_dict,
    stripe_coeffs,
)


def runs_in_row(row):
    """[(start, length), ...] of 255-runs in a 1-d mask row."""
    out = []
    x = 0
    w = len(row)
    while x < w:
        if row[x] == 255:
            start = x
            while x < w and row[x] == 255:
                x += 1
            out.append((start, x - start))
        else:
            x += 1
    return out


def test_stripe_coeffs_hit_anchors():
    rng = np.random.default_rng(0)
    for _ in range(50):
        a = rng.uniform(-2e-4, 2e-4)
        y0, y1 = 120.0, 360.0
        x0, x1 = rng.uniform(0, 640, size=2)
        aa, b, c = stripe_coeffs(a, y0, x0, y1, x1)
        assert aa == a
        assert aa * y0 * y0 + b * y0 + c == pytest.approx(x0, abs=1e-9)
        assert aa * y1 * y1 + b * y1 + c == pytest.approx(x1, abs=1e-9)


def test_rasterize_stripe_width_and_distance():
    rng = np.random.default_rng(1)
    for _ in range(20):
        stroke = int(rng.integers(1, 9))
        a = rng.uniform(-2e-4, 2e-4)
        coeffs = stripe_coeffs(a, 0.0, rng.uniform(60, 120), 64.0, rng.uniform(60, 120))
        mask = np.zeros((64, 200), dtype=np.uint8)
        rasterize_stripe(mask, coeffs, 0, 64, stroke, 255)
        for y in range(64):
            runs = runs_in_row(mask[y])
            assert len(runs) == 1 and runs[0][1] == stroke
            yc = y + 0.5
            xc = coeffs[0] * yc * yc + coeffs[1] * yc + coeffs[2]
            for x in range(runs[0][0], runs[0][0] + runs[0][1]):
                # pixel [x, x+1) overlaps the continuous stripe interval, so the
                # pixel center sits within stroke/2 plus half-pixel slack
                assert x + 1 > xc - stroke / 2.0 and x < xc + stroke / 2.0
                assert abs((x + 0.5) - xc) <= stroke / 2.0 + 0.5


def test_scene_is_deterministic():
    cfg = SceneConfig()
    s1 = generate_scene(cfg, 1234)
    s2 = generate_scene(cfg, 1234)
    assert np.array_equal(s1.clear.data, s2.clear.data)
    assert np.array_equal(s1.lane_mask.data, s2.lane_mask.data)
    assert s1.road_roi == s2.road_roi
    s3 = generate_scene(cfg, 1235)
    assert not np.array_equal(s1.clear.data, s3.clear.data)


def test_scene_stripes_have_exact_width_and_even_spacing():
    cfg = SceneConfig()
    for seed in (0, 7, 99, 1000):
        scene = generate_scene(cfg, seed)
        mask = scene.lane_mask.data
        assert scene.lane_mask.is_binary()
        for y in range(cfg.horizon_y, cfg.height):
            runs = runs_in_row(mask[y])
            assert len(runs) == cfg.lane_count, f"seed={seed} y={y}"
            assert all(length == cfg.stroke for _, length in runs)
            centers = [start + length / 2.0 for start, length in runs]
            gaps = np.diff(centers)
            assert np.ptp(gaps) <= 1.1, f"seed={seed} y={y} gaps={gaps}"
        assert mask[: cfg.horizon_y].max() == 0


def test_scene_lane_pixels_inside_roi():
    cfg = SceneConfig()
    for seed in (3, 42, 777):
        scene = generate_scene(cfg, seed)
        roi = polygon_mask(scene.road_roi, cfg.width, cfg.height).data
        outside = (scene.lane_mask.data == 255) & (roi == 0)
        assert not outside.any(), f"seed={seed}: {int(outside.sum())} stray pixels"


def test_scene_luma_separation():
    cfg = SceneConfig()
    scene = generate_scene(cfg, 5)
    lum = luma(scene.clear)
    stripe = scene.lane_mask.data == 255
    roi = polygon_mask(scene.road_roi, cfg.width, cfg.height).data == 255
    road = roi & ~stripe
    assert lum[stripe].mean() > 200
    assert lum[road].mean() < 130
    # pixel-level margins hold with headroom over the noise floor
    assert lum[stripe].min() > 170
    assert lum[road].max() < 170


def test_scene_config_validation():
    with pytest.raises(ValueError):
        SceneConfig(lane_count=0)
    with pytest.raises(ValueError):
        SceneConfig(horizon_y=360)
    with pytest.raises(ValueError):
        SceneConfig(stroke=0)
    with pytest.raises(ValueError):
        SceneConfig(curvature_max=-1e-4)


def test_scene_config_dict_round_trip():
    cfg = SceneConfig(lane_count=4, curvature_max=2e-4)
    back = scene_config_from_dict(scene_config_to_dict(cfg))
    assert back == cfg


def test_generate_corpus_layout_and_determinism(tmp_path):
    cfg = SceneConfig(width=320, height=180, horizon_y=60, spacing_bottom=(50, 60),
                      spacing_top=(16, 20), center_jitter=15, drift_max=20)
    out1 = str(tmp_path / "c1")
    out2 = str(tmp_path / "c2")
    m1 = generate_corpus(cfg, 4, out1, seed=11)
    generate_corpus(cfg, 4, out2, seed=11)
    assert m1.frame_ids() == ["scene_0000", "scene_0001", "scene_0002", "scene_0003"]

    strict = read_manifest(os.path.join(out1, "manifest.json"))
    assert len(strict.frames) == 4
    assert strict.frames[0].source == "synthetic"
    assert strict.frames[0].road_roi is not None

    for rel in ("manifest.json", "frames/scene_0002_clear.png", "masks/scene_0002_lanes.png"):
        b1 = open(os.path.join(out1, rel), "rb").read()
        b2 = open(os.path.join(out2, rel), "rb").read()
        assert b1 == b2, rel

    # per-frame seeds differ, so frames differ
    b_a = open(os.path.join(out1, "frames/scene_0000_clear.png"), "rb").read()
    b_b = open(os.path.join(out1, "frames/scene_0001_clear.png"), "rb").read()
    assert b_a != b_b


def test_generate_scene_returns_scene_type():
    scene = generate_scene(SceneConfig(), 0)
    assert isinstance(scene, Scene)
    assert set(scene.params) >= {"a", "coeffs", "spacing_bottom", "spacing_top"}
    assert len(scene.params["coeffs"]) == SceneConfig().lane_count


def test_lane_mask_equals_rendered_model():
    cfg = SceneConfig()
    for seed in (0, 7, 99):
        scene = generate_scene(cfg, seed)
        again = render_lane_mask(scene.lanes, scene.lane_mask.data.shape, cfg.stroke)
        assert np.array_equal(again.data, scene.lane_mask.data)
        assert scene.lanes.y_top == cfg.horizon_y
        assert scene.lanes.y_bottom == cfg.height
        assert len(scene.lanes) == cfg.lane_count


def test_lane_model_validation():
    with pytest.raises(ValueError):
        LaneModel(curves=(), y_top=10, y_bottom=10)
    with pytest.raises(ValueError):
        LaneModel(curves=((0.0, 0.0, 50.0), (0.0, 0.0, 20.0)), y_top=0, y_bottom=10)
    with pytest.raises(ValueError):
        LaneModel(curves=((0.0, 1.0),), y_top=0, y_bottom=10)
    model = LaneModel(curves=((0.0, 0.0, 20.0), (0.0, 0.0, 50.0)), y_top=0, y_bottom=10)
    assert len(model) == 2
    empty = LaneModel(curves=(), y_top=0, y_bottom=10)
    assert len(empty) == 0
    assert (render_lane_mask(empty, (12, 12), 5).data == 0).all()
