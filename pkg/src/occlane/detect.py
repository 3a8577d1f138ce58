"""Occlusion detectors: ground-truth oracle, frame-differencing classical
detector, and box-to-mask conversion feeding the inpainter."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.ndimage as ndi

from occlane.core import BBox, FrameRecord, RasterImage, RasterMask, TRAFFIC_CLASSES

DETECT_MODES = ("oracle", "diff", "external")


@dataclass(frozen=True)
class DetectorConfig:
    mode: str = "oracle"
    diff_threshold: int = 12
    min_component_area: int = 64
    open_radius: int = 1
    class_filter: frozenset = field(default_factory=lambda: frozenset(range(len(TRAFFIC_CLASSES))))
    box_dilation: int = 2
    conf_threshold: float = 0.25

    def __post_init__(self):
        if self.mode not in DETECT_MODES:
            raise ValueError(f"mode must be one of {DETECT_MODES}, got {self.mode!r}")
        if not (0 <= self.diff_threshold <= 255):
            raise ValueError("diff_threshold outside 0..255")
        if self.min_component_area < 1:
            raise ValueError("min_component_area must be >= 1")
        if self.open_radius < 0 or self.box_dilation < 0:
            raise ValueError("radii must be >= 0")
        if not isinstance(self.class_filter, frozenset):
            object.__setattr__(self, "class_filter", frozenset(self.class_filter))


def detect_oracle(frame: FrameRecord, cfg: DetectorConfig | None = None) -> list[BBox]:
    """Ground-truth boxes filtered by class, confidence forced to 1.0."""
    cfg = cfg or DetectorConfig()
    if not frame.occlusion_boxes:
        raise ValueError(f"frame {frame.id!r} has no occlusion boxes for the oracle detector")
    out = []
    for b in frame.occlusion_boxes:
        if b.class_id in cfg.class_filter:
            out.append(BBox(b.x_min, b.y_min, b.x_max, b.y_max, b.class_id, 1.0))
    return out


def detect_diff(occluded: RasterImage, clear_ref: RasterImage, cfg: DetectorConfig) -> list[BBox]:
    """Max-channel absolute difference -> threshold -> opening -> 8-connected
    components; confidence grows with component area, class unknown (0)."""
    if occluded.data.shape != clear_ref.data.shape:
        raise ValueError(
            f"frame size mismatch {occluded.data.shape} vs {clear_ref.data.shape}"
        )
    diff = np.abs(occluded.data.astype(np.int16) - clear_ref.data.astype(np.int16)).max(axis=2)
    changed = diff >= cfg.diff_threshold
    if cfg.open_radius > 0:
        structure = np.ones((2 * cfg.open_radius + 1,) * 2, dtype=bool)
        changed = ndi.binary_erosion(changed, structure=structure)
        changed = ndi.binary_dilation(changed, structure=structure)
    labels, n = ndi.label(changed, structure=np.ones((3, 3), dtype=bool))
    boxes = []
    for idx, sl in enumerate(ndi.find_objects(labels, n), start=1):
        if sl is None:
            continue
        area = int(np.count_nonzero(labels[sl] == idx))
        if area < cfg.min_component_area:
            continue
        conf = min(1.0, area / (4.0 * cfg.min_component_area))
        boxes.append(BBox(sl[1].start, sl[0].start, sl[1].stop, sl[0].stop, 0, conf))
    boxes.sort(key=lambda b: (b.y_min, b.x_min, b.y_max, b.x_max))
    return boxes


def boxes_to_mask(boxes: list[BBox], width: int, height: int, box_dilation: int) -> RasterMask:
    """Union of the boxes, each grown by box_dilation on every side, clipped."""
    if box_dilation < 0:
        raise ValueError("box_dilation must be >= 0")
    out = np.zeros((height, width), dtype=np.uint8)
    for b in boxes:
        grown = b.grown(box_dilation).clipped(width, height)
        if grown is not None:
            out[grown.y_min : grown.y_max, grown.x_min : grown.x_max] = 255
    return RasterMask(out)
