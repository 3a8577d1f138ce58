"""Occluder sprites and compositing: build occlusion-augmented corpora from
clear frames while leaving lane ground truth untouched.

Sprites are RGBA rasters; a library on disk is a directory of RGBA PNGs named
<class>_<n>.png with the class parsed from the filename. Compositing is
integer alpha-over, exact for fully opaque and fully transparent samples, and
pixels outside a sprite's nonzero-alpha footprint are never modified.
"""

from __future__ import annotations

import logging
import os
import shutil
from dataclasses import dataclass, replace

import cv2
import numpy as np
from PIL import Image

from occlane.core import (
    BBox,
    DatasetManifest,
    FrameRecord,
    RasterImage,
    TRAFFIC_CLASSES,
    derive_seed,
    load_raster,
    polygon_mask,
    save_raster,
    write_manifest,
)
from occlane.metrics import box_iou

log = logging.getLogger("occlane.augment")

DEPTH_SCALE = (0.35, 1.0)  # perspective multiplier at ROI top -> bottom
SCALE_JITTER = (0.85, 1.15)
DEPTH_RANGE = (0.25, 1.0)  # anchor depth fraction within the ROI's vertical span
PLACEMENT_RETRIES = 50


@dataclass(frozen=True)
class OccluderSprite:
    rgba: np.ndarray  # (h, w, 4) uint8
    class_id: int
    nominal_base_width: int

    def __post_init__(self):
        arr = self.rgba
        if arr.dtype != np.uint8 or arr.ndim != 3 or arr.shape[2] != 4:
            raise ValueError(f"sprite needs (h, w, 4) uint8 data, got {arr.dtype} {arr.shape}")
        if not (arr[:, :, 3] > 0).any():
            raise ValueError("sprite has no visible pixels (alpha all zero)")
        if not (0 <= self.class_id < len(TRAFFIC_CLASSES)):
            raise ValueError(f"class_id {self.class_id} outside the traffic class list")
        arr.flags.writeable = False

    @property
    def class_name(self) -> str:
        return TRAFFIC_CLASSES[self.class_id]


@dataclass(frozen=True)
class PlacementPolicy:
    occluders_per_frame: tuple[int, int] = (1, 3)
    scale_by_y: bool = True
    max_mutual_iou: float = 0.3
    require_road_intersection: bool = True
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.occluders_per_frame
        if lo < 1 or hi < lo:
            raise ValueError(f"occluders_per_frame range {self.occluders_per_frame} invalid")
        if not (0.0 <= self.max_mutual_iou <= 1.0):
            raise ValueError("max_mutual_iou must be in [0, 1]")


def _scaled_rgba(rgba: np.ndarray, scale: float) -> np.ndarray:
    if scale <= 0:
        raise ValueError("scale must be > 0")
    h, w = rgba.shape[:2]
    nw, nh = max(1, round(w * scale)), max(1, round(h * scale))
    if (nw, nh) == (w, h):
        return rgba
    # nearest keeps binary alpha binary, so footprints stay crisp
    return cv2.resize(rgba, (nw, nh), interpolation=cv2.INTER_NEAREST)


def _overlap_window(frame_w, frame_h, x0, y0, sw, sh):
    dx0, dy0 = max(x0, 0), max(y0, 0)
    dx1, dy1 = min(x0 + sw, frame_w), min(y0 + sh, frame_h)
    if dx0 >= dx1 or dy0 >= dy1:
        return None
    return dx0, dy0, dx1, dy1


def composite_occluder(
    clear: RasterImage, sprite: OccluderSprite, position: tuple[int, int], scale: float
) -> tuple[RasterImage, BBox]:
    """Alpha-over the scaled sprite with its top-left corner at `position`
    (may be negative: sprites can straddle frame edges). Returns the composited
    frame and the tight box of visible (alpha > 0) sprite pixels, clipped to
    the frame, confidence 1.0."""
    scaled = _scaled_rgba(sprite.rgba, scale)
    sh, sw = scaled.shape[:2]
    x0, y0 = int(position[0]), int(position[1])
    win = _overlap_window(clear.width, clear.height, x0, y0, sw, sh)
    if win is None:
        raise ValueError(f"sprite at {position} scale {scale} lies fully outside the frame")
    dx0, dy0, dx1, dy1 = win
    patch = scaled[dy0 - y0 : dy1 - y0, dx0 - x0 : dx1 - x0]
    alpha = patch[:, :, 3].astype(np.uint32)
    if not (alpha > 0).any():
        raise ValueError("sprite footprint does not intersect the frame")

    out = clear.data.copy()
    region = out[dy0:dy1, dx0:dx1]
    fg = patch[:, :, :3].astype(np.uint32)
    a3 = alpha[:, :, None]
    blended = ((a3 * fg + (255 - a3) * region.astype(np.uint32) + 127) // 255).astype(np.uint8)
    visible = alpha > 0
    region[visible] = blended[visible]

    ys, xs = np.nonzero(visible)
    box = BBox(
        x_min=dx0 + int(xs.min()),
        y_min=dy0 + int(ys.min()),
        x_max=dx0 + int(xs.max()) + 1,
        y_max=dy0 + int(ys.max()) + 1,
        class_id=sprite.class_id,
        confidence=1.0,
    )
    return RasterImage(out), box


# ---------------------------------------------------------------------------
# Sprite library


def _canvas(w: int, h: int) -> np.ndarray:
    return np.zeros((h, w, 4), dtype=np.uint8)


def _rect(arr, x0, y0, x1, y1, color):
    arr[y0:y1, x0:x1, :3] = color
    arr[y0:y1, x0:x1, 3] = 255


def _disk(arr, cx, cy, r, color):
    h, w = arr.shape[:2]
    ys, xs = np.ogrid[:h, :w]
    sel = (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r
    arr[sel, :3] = color
    arr[sel, 3] = 255


def _ring(arr, cx, cy, r_outer, r_inner, color):
    h, w = arr.shape[:2]
    ys, xs = np.ogrid[:h, :w]
    d2 = (xs - cx) ** 2 + (ys - cy) ** 2
    sel = (d2 <= r_outer * r_outer) & (d2 >= r_inner * r_inner)
    arr[sel, :3] = color
    arr[sel, 3] = 255


def builtin_sprites() -> list[OccluderSprite]:
    """Deterministic procedural sprite set covering all traffic classes. The
    palettes are dark so occluders contrast with both road gray and lane paint."""
    sprites = []

    def car(body, cabin):
        arr = _canvas(120, 60)
        _rect(arr, 0, 24, 120, 52, body)
        _rect(arr, 26, 6, 94, 28, cabin)
        _rect(arr, 32, 10, 58, 24, (70, 90, 110))
        _rect(arr, 62, 10, 88, 24, (70, 90, 110))
        _disk(arr, 24, 52, 8, (12, 12, 14))
        _disk(arr, 96, 52, 8, (12, 12, 14))
        return arr

    sprites.append(OccluderSprite(car((38, 42, 66), (30, 34, 52)), 0, 120))
    sprites.append(OccluderSprite(car((72, 30, 32), (56, 24, 26)), 0, 120))

    ped = _canvas(36, 90)
    _disk(ped, 18, 12, 9, (62, 46, 40))
    _rect(ped, 8, 20, 28, 56, (44, 32, 58))
    _rect(ped, 10, 56, 17, 88, (26, 26, 36))
    _rect(ped, 19, 56, 26, 88, (26, 26, 36))
    sprites.append(OccluderSprite(ped, 1, 36))

    truck = _canvas(150, 84)
    _rect(truck, 0, 6, 104, 62, (46, 52, 58))
    _rect(truck, 104, 24, 150, 62, (32, 46, 72))
    _rect(truck, 112, 30, 142, 46, (70, 90, 110))
    for cx in (24, 76, 128):
        _disk(truck, cx, 66, 9, (12, 12, 14))
    sprites.append(OccluderSprite(truck, 2, 150))

    bus = _canvas(170, 70)
    _rect(bus, 0, 4, 170, 56, (52, 40, 26))
    for i in range(6):
        _rect(bus, 10 + i * 26, 10, 30 + i * 26, 26, (70, 90, 110))
    _disk(bus, 34, 58, 8, (12, 12, 14))
    _disk(bus, 136, 58, 8, (12, 12, 14))
    sprites.append(OccluderSprite(bus, 3, 170))

    train = _canvas(200, 72)
    _rect(train, 0, 6, 96, 58, (36, 40, 46))
    _rect(train, 104, 6, 200, 58, (36, 40, 46))
    _rect(train, 0, 58, 200, 66, (20, 20, 24))
    _rect(train, 8, 14, 88, 30, (70, 90, 110))
    sprites.append(OccluderSprite(train, 4, 200))

    moto = _canvas(70, 54)
    _disk(moto, 16, 40, 11, (16, 16, 20))
    _disk(moto, 54, 40, 11, (16, 16, 20))
    _rect(moto, 12, 18, 58, 34, (58, 28, 28))
    sprites.append(OccluderSprite(moto, 5, 70))

    bike = _canvas(64, 54)
    _ring(bike, 14, 38, 13, 9, (24, 24, 30))
    _ring(bike, 50, 38, 13, 9, (24, 24, 30))
    _rect(bike, 14, 14, 50, 20, (40, 30, 24))
    _rect(bike, 30, 18, 36, 40, (40, 30, 24))
    sprites.append(OccluderSprite(bike, 6, 64))

    return sprites


def save_sprite_library(sprites: list[OccluderSprite], dir_path: str) -> None:
    os.makedirs(dir_path, exist_ok=True)
    counters: dict[int, int] = {}
    for sp in sprites:
        n = counters.get(sp.class_id, 0)
        counters[sp.class_id] = n + 1
        name = f"{sp.class_name}_{n:02d}.png"
        Image.fromarray(np.asarray(sp.rgba), mode="RGBA").save(os.path.join(dir_path, name))


def load_sprite_library(dir_path: str) -> list[OccluderSprite]:
    if not os.path.isdir(dir_path):
        raise ValueError(f"sprite directory not found: {dir_path}")
    sprites = []
    for name in sorted(os.listdir(dir_path)):
        if not name.lower().endswith(".png"):
            continue
        stem = name[:-4]
        cls = stem.rsplit("_", 1)[0]
        if cls not in TRAFFIC_CLASSES:
            raise ValueError(f"sprite file {name!r}: class {cls!r} not one of {TRAFFIC_CLASSES}")
        with Image.open(os.path.join(dir_path, name)) as im:
            rgba = np.ascontiguousarray(im.convert("RGBA"), dtype=np.uint8)
        sprites.append(
            OccluderSprite(rgba, TRAFFIC_CLASSES.index(cls), nominal_base_width=rgba.shape[1])
        )
    if not sprites:
        raise ValueError(f"no sprite PNGs in {dir_path}")
    return sprites


# ---------------------------------------------------------------------------
# Dataset builder


def _roi_row_span(roi_mask: np.ndarray, y: float):
    row = roi_mask[min(roi_mask.shape[0] - 1, max(0, int(y) - 1))]
    xs = np.nonzero(row)[0]
    if xs.size == 0:
        return None
    return int(xs[0]), int(xs[-1]) + 1


def _place_one(image, roi_mask, roi_top, roi_bot, sprites, policy, placed, rng):
    """One placement attempt; None when the draw fails a constraint."""
    sprite = sprites[int(rng.integers(len(sprites)))]
    t = float(rng.uniform(*DEPTH_RANGE))
    jitter = float(rng.uniform(*SCALE_JITTER))
    persp = DEPTH_SCALE[0] + (DEPTH_SCALE[1] - DEPTH_SCALE[0]) * t if policy.scale_by_y else 1.0
    scale = persp * jitter
    scaled = _scaled_rgba(sprite.rgba, scale)
    sh, sw = scaled.shape[:2]

    y_bottom = roi_top + t * (roi_bot - roi_top)
    if roi_mask is not None:
        span = _roi_row_span(roi_mask, y_bottom)
        if span is None:
            return None
        xl, xr = span
    else:
        xl, xr = 0, image.width
    x_center = float(rng.uniform(xl - sw / 2.0, xr + sw / 2.0))
    x0 = round(x_center - sw / 2.0)
    y0 = round(y_bottom) - sh

    win = _overlap_window(image.width, image.height, x0, y0, sw, sh)
    if win is None:
        return None
    dx0, dy0, dx1, dy1 = win
    visible = scaled[dy0 - y0 : dy1 - y0, dx0 - x0 : dx1 - x0, 3] > 0
    if not visible.any():
        return None
    if roi_mask is not None:
        on_road = visible & (roi_mask[dy0:dy1, dx0:dx1] > 0)
        if not on_road.any():
            return None
    ys, xs = np.nonzero(visible)
    candidate = BBox(
        dx0 + int(xs.min()), dy0 + int(ys.min()),
        dx0 + int(xs.max()) + 1, dy0 + int(ys.max()) + 1,
        sprite.class_id, 1.0,
    )
    if any(box_iou(candidate, prev) > policy.max_mutual_iou for prev in placed):
        return None
    occluded, box = composite_occluder(image, sprite, (x0, y0), scale)
    assert box == candidate
    return occluded, box


def augment_frame(
    clear: RasterImage,
    road_roi,
    sprites: list[OccluderSprite],
    policy: PlacementPolicy,
    frame_seed: int,
) -> tuple[RasterImage, list[BBox]] | None:
    """Place a policy-drawn number of occluders; None when placement cannot
    satisfy the constraints within the retry budget."""
    rng = np.random.default_rng(frame_seed)
    lo, hi = policy.occluders_per_frame
    count = int(rng.integers(lo, hi + 1))

    roi_mask = None
    roi_top, roi_bot = 0.0, float(clear.height)
    if road_roi is not None:
        roi_mask = polygon_mask(road_roi, clear.width, clear.height).data
        ys = [p[1] for p in road_roi]
        roi_top, roi_bot = min(ys), max(ys)
    elif policy.require_road_intersection:
        raise ValueError("placement requires road_roi but the frame has none")

    image = clear
    placed: list[BBox] = []
    for _ in range(count):
        for _attempt in range(PLACEMENT_RETRIES):
            got = _place_one(
                image,
                roi_mask if policy.require_road_intersection else None,
                roi_top, roi_bot, sprites, policy, placed, rng,
            )
            if got is not None:
                image, box = got
                placed.append(box)
                break
        else:
            return None
    return image, placed


def build_augmented_dataset(
    manifest: DatasetManifest,
    sprites: list[OccluderSprite],
    policy: PlacementPolicy,
    out_dir: str | None = None,
) -> DatasetManifest:
    """Composite occluders onto every frame of a clear corpus. Lane masks are
    untouched. Frames whose placement fails after the retry budget are dropped
    with a logged warning. Deterministic under policy.seed (per-frame sub-seeds
    derived from (policy.seed, frame.id))."""
    if not sprites:
        raise ValueError("sprite library is empty")
    if not manifest.frames:
        raise ValueError("manifest has no frames")
    out_dir = out_dir or manifest.base_dir
    in_place = os.path.abspath(out_dir) == os.path.abspath(manifest.base_dir)

    out_frames = []
    for frame in manifest.frames:
        if not frame.clear_image or not frame.lane_mask:
            raise ValueError(f"frame {frame.id!r} lacks clear_image or lane_mask")
        clear = load_raster(manifest.resolve(frame.clear_image))
        if not isinstance(clear, RasterImage):
            raise ValueError(f"frame {frame.id!r}: clear_image is not RGB")
        result = augment_frame(
            clear, frame.road_roi, sprites, policy, derive_seed(policy.seed, frame.id)
        )
        if result is None:
            log.warning("frame %s: placement failed after %d retries; frame skipped",
                        frame.id, PLACEMENT_RETRIES)
            continue
        occluded, boxes = result
        if not in_place:
            for rel in (frame.clear_image, frame.lane_mask):
                dst = os.path.join(out_dir, rel)
                os.makedirs(os.path.dirname(dst), exist_ok=True)
                shutil.copyfile(manifest.resolve(rel), dst)
        occ_rel = os.path.join("frames", f"{frame.id}_occluded.png")
        save_raster(occluded, os.path.join(out_dir, occ_rel))
        out_frames.append(replace_frame(frame, occ_rel, boxes))

    out = DatasetManifest(
        frames=out_frames, class_names=list(manifest.class_names), base_dir=out_dir
    )
    write_manifest(out, os.path.join(out_dir, "manifest.json"))
    return out


def replace_frame(frame: FrameRecord, occ_rel: str, boxes: list[BBox]) -> FrameRecord:
    return FrameRecord(
        id=frame.id,
        clear_image=frame.clear_image,
        occluded_image=occ_rel,
        lane_mask=frame.lane_mask,
        occlusion_boxes=list(boxes),
        road_roi=frame.road_roi,
        seed=frame.seed,
        source=frame.source,
    )
