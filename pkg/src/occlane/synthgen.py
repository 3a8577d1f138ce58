"""Synthetic road-scene generator.

Each scene is a perspective trapezoid of road with `lane_count` painted lane
stripes converging toward a horizon. Stripes follow x = a*y^2 + b*y + c with a
single curvature coefficient `a` shared by every stripe in the scene, so the
stripes stay evenly spaced at every scanline, not just at the anchors.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field

import numpy as np

from occlane.core import (
    DatasetManifest,
    FrameRecord,
    RasterImage,
    RasterMask,
    derive_seed,
    save_raster,
    write_manifest,
)

# Vertical band of ground visible between the sky and the road's top edge; it
# keeps the strong sky/ground and road/ground horizontal edges a few rows above
# the ROI so they never leak gradient response into the lane search region.
GROUND_BAND = 8
ROAD_APRON = 8  # road paint extends this far outside the ROI on every side

SKY_TOP = (135, 165, 205)
SKY_BOTTOM = (168, 188, 216)
GROUND_COLOR = (62, 88, 54)


@dataclass(frozen=True)
class SceneConfig:
    width: int = 640
    height: int = 360
    lane_count: int = 3
    horizon_y: int = 120
    stroke: int = 5
    road_brightness: int = 105
    lane_brightness: int = 230
    noise_sigma: float = 6.0
    curvature_max: float = 1.5e-4
    spacing_bottom: tuple[float, float] = (90.0, 130.0)
    # top spacing stays wider than the default segmentation window halfwidth
    # (20) plus the stripe and edge ring (~4 px), so converged lanes never sit
    # inside a neighbor's search window near the horizon
    spacing_top: tuple[float, float] = (28.0, 40.0)
    center_jitter: float = 40.0
    drift_max: float = 60.0

    def __post_init__(self):
        if self.lane_count < 1:
            raise ValueError("lane_count must be >= 1")
        if not (0 < self.horizon_y < self.height):
            raise ValueError("horizon_y must lie inside the frame")
        if self.stroke < 1:
            raise ValueError("stroke must be >= 1")
        if self.curvature_max < 0:
            raise ValueError("curvature_max must be >= 0")


@dataclass(frozen=True)
class LaneModel:
    """Per-lane quadratics x = a*y^2 + b*y + c over rows [y_top, y_bottom),
    ordered left to right at the bottom row. May hold zero curves."""

    curves: tuple[tuple[float, float, float], ...]
    y_top: int
    y_bottom: int

    def __post_init__(self):
        if self.y_top >= self.y_bottom:
            raise ValueError("y_top must be < y_bottom")
        object.__setattr__(self, "curves", tuple(tuple(float(v) for v in c) for c in self.curves))
        if any(len(c) != 3 for c in self.curves):
            raise ValueError("each curve is an (a, b, c) triple")
        yb = self.y_bottom - 0.5
        xs = [curve_x(c, yb) for c in self.curves]
        if any(x0 > x1 for x0, x1 in zip(xs, xs[1:])):
            raise ValueError("curves must be ordered left to right at the bottom row")

    def __len__(self):
        return len(self.curves)


def curve_x(coeffs, yc: float) -> float:
    a, b, c = coeffs
    return a * yc * yc + b * yc + c


@dataclass
class Scene:
    clear: RasterImage
    lane_mask: RasterMask
    road_roi: list[tuple[float, float]]
    lanes: LaneModel
    params: dict = field(default_factory=dict)


def stripe_coeffs(a: float, y_top: float, x_top: float, y_bot: float, x_bot: float):
    """Solve b, c so that x = a*y^2 + b*y + c hits both anchors."""
    b = (x_bot - x_top - a * (y_bot**2 - y_top**2)) / (y_bot - y_top)
    c = x_top - a * y_top**2 - b * y_top
    return a, b, c


def rasterize_stripe(target: np.ndarray, coeffs, y0: int, y1: int, stroke: int, value) -> None:
    """Paint a stripe of exact `stroke` width into rows [y0, y1). The painted
    columns for a row are the half-open run [ceil(xc - stroke/2), ceil(xc + stroke/2))
    around the curve evaluated at the row's pixel center."""
    a, b, c = coeffs
    width = target.shape[1]
    half = stroke / 2.0
    for y in range(y0, y1):
        yc = y + 0.5
        xc = a * yc * yc + b * yc + c
        lo = max(0, int(np.ceil(xc - half)))
        hi = min(width, int(np.ceil(xc + half)))
        if lo < hi:
            target[y, lo:hi] = value


def render_lane_mask(model: LaneModel, size: tuple[int, int], stroke: int) -> RasterMask:
    """Rasterize every curve of the model into a (height, width) binary mask.
    `size` follows ndarray shape order. Rows outside the frame are clipped."""
    h, w = size
    if stroke < 1:
        raise ValueError("stroke must be >= 1")
    mask = np.zeros((h, w), dtype=np.uint8)
    y0, y1 = max(0, model.y_top), min(h, model.y_bottom)
    for cf in model.curves:
        rasterize_stripe(mask, cf, y0, y1, stroke, 255)
    return RasterMask(mask)


def _fill_trapezoid(image: np.ndarray, y0: int, y1: int, left_of_y, right_of_y, color) -> None:
    width = image.shape[1]
    for y in range(max(0, y0), min(image.shape[0], y1)):
        yc = y + 0.5
        lo = max(0, int(np.ceil(left_of_y(yc))))
        hi = min(width, int(np.ceil(right_of_y(yc))))
        if lo < hi:
            image[y, lo:hi] = color


def generate_scene(config: SceneConfig, seed: int) -> Scene:
    """Deterministic for (config, seed); the clear frame contains no occluders."""
    rng = np.random.default_rng(seed)
    w, h, n = config.width, config.height, config.lane_count
    y_top, y_bot = float(config.horizon_y), float(h)

    a = float(rng.uniform(-config.curvature_max, config.curvature_max))
    d_bot = float(rng.uniform(*config.spacing_bottom))
    d_top = float(rng.uniform(*config.spacing_top))
    cx_bot = w / 2.0 + float(rng.uniform(-config.center_jitter, config.center_jitter))
    cx_top = cx_bot + float(rng.uniform(-config.drift_max, config.drift_max))
    road_jit = int(rng.integers(-5, 6))
    lane_jit = int(rng.integers(-8, 9))

    coeffs = []
    for i in range(n):
        off = i - (n - 1) / 2.0
        coeffs.append(stripe_coeffs(a, y_top, cx_top + off * d_top, y_bot, cx_bot + off * d_bot))

    # ROI half-width margin: stroke plus slack plus the worst sagitta of the
    # quadratic against the straight ROI edge over the [horizon, bottom] span.
    bulge = abs(a) * (y_bot - y_top) ** 2 / 4.0
    margin = config.stroke + 10.0 + bulge
    half_top = (n - 1) / 2.0 * d_top + margin
    half_bot = (n - 1) / 2.0 * d_bot + margin
    roi = [
        (cx_bot - half_bot, y_bot),
        (cx_bot + half_bot, y_bot),
        (cx_top + half_top, y_top),
        (cx_top - half_top, y_top),
    ]

    def edge(x_t, x_b):
        return lambda y: x_t + (x_b - x_t) * (y - y_top) / (y_bot - y_top)

    road_left = edge(cx_top - half_top - ROAD_APRON, cx_bot - half_bot - ROAD_APRON)
    road_right = edge(cx_top + half_top + ROAD_APRON, cx_bot + half_bot + ROAD_APRON)

    image = np.zeros((h, w, 3), dtype=np.float64)
    sky_rows = max(1, config.horizon_y - 2 * GROUND_BAND)
    for y in range(sky_rows):
        t = y / max(1, sky_rows - 1)
        image[y] = [s0 + t * (s1 - s0) for s0, s1 in zip(SKY_TOP, SKY_BOTTOM)]
    image[sky_rows:] = GROUND_COLOR

    road_color = np.clip(config.road_brightness + road_jit, 0, 255)
    _fill_trapezoid(image, config.horizon_y - GROUND_BAND, h, road_left, road_right,
                    (road_color, road_color, road_color))

    stripe_color = np.clip(config.lane_brightness + lane_jit, 0, 255)
    model = LaneModel(curves=tuple(coeffs), y_top=config.horizon_y, y_bottom=h)
    lane_mask = render_lane_mask(model, (h, w), config.stroke)
    image[lane_mask.data == 255] = stripe_color

    image += rng.normal(0.0, config.noise_sigma, size=(h, w, 3))
    clear = RasterImage(np.clip(np.rint(image), 0, 255).astype(np.uint8))

    params = {
        "a": a,
        "coeffs": [list(cf) for cf in coeffs],
        "spacing_bottom": d_bot,
        "spacing_top": d_top,
        "margin": margin,
        "road_brightness": int(road_color),
        "lane_brightness": int(stripe_color),
    }
    return Scene(clear=clear, lane_mask=lane_mask, road_roi=roi, lanes=model, params=params)


def generate_corpus(config: SceneConfig, count: int, out_dir: str, seed: int) -> DatasetManifest:
    """Write `count` scenes under out_dir (frames/, masks/, manifest.json)."""
    if count < 1:
        raise ValueError("count must be >= 1")
    frames = []
    for i in range(count):
        frame_id = f"scene_{i:04d}"
        frame_seed = derive_seed(seed, frame_id)
        scene = generate_scene(config, frame_seed)
        clear_rel = os.path.join("frames", f"{frame_id}_clear.png")
        mask_rel = os.path.join("masks", f"{frame_id}_lanes.png")
        save_raster(scene.clear, os.path.join(out_dir, clear_rel))
        save_raster(scene.lane_mask, os.path.join(out_dir, mask_rel))
        frames.append(
            FrameRecord(
                id=frame_id,
                clear_image=clear_rel,
                lane_mask=mask_rel,
                occluded_image=None,
                occlusion_boxes=[],
                road_roi=scene.road_roi,
                seed=frame_seed,
                source="synthetic",
            )
        )
    manifest = DatasetManifest(frames=frames)
    write_manifest(manifest, os.path.join(out_dir, "manifest.json"))
    manifest.base_dir = out_dir
    return manifest


def scene_config_to_dict(config: SceneConfig) -> dict:
    out = asdict(config)
    out["spacing_bottom"] = list(out["spacing_bottom"])
    out["spacing_top"] = list(out["spacing_top"])
    return out


def scene_config_from_dict(obj: dict) -> SceneConfig:
    kwargs = dict(obj)
    for key in ("spacing_bottom", "spacing_top"):
        if key in kwargs:
            kwargs[key] = tuple(kwargs[key])
    return SceneConfig(**kwargs)
