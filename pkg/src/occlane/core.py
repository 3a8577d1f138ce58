"""Raster types, binary-mask morphology, PNG I/O, and the dataset manifest format.

Conventions used throughout the package:
  - origin at the top-left, x rightward, y downward
  - boxes are half-open on their max edges, so area == (x_max-x_min)*(y_max-y_min)
  - binary masks store 255 for positive, 0 for negative
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.ndimage as ndi
from PIL import Image

MANIFEST_SCHEMA_VERSION = 1

# The seven traffic classes the detector stage cares about; class_id indexes this list.
TRAFFIC_CLASSES = ("car", "pedestrian", "truck", "bus", "train", "motorcycle", "bicycle")


class ManifestError(ValueError):
    """Raised when a dataset manifest fails validation."""


@dataclass(frozen=True)
class RasterImage:
    """8-bit RGB image. The constructor takes ownership of `data` and freezes it."""

    data: np.ndarray  # (height, width, 3) uint8

    def __post_init__(self):
        arr = self.data
        if arr.dtype != np.uint8 or arr.ndim != 3 or arr.shape[2] != 3:
            raise ValueError(f"RasterImage needs (h, w, 3) uint8 data, got {arr.dtype} {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError("RasterImage must be at least 1x1")
        arr.flags.writeable = False

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class RasterMask:
    """8-bit single-channel mask; after binarize() every sample is 0 or 255."""

    data: np.ndarray  # (height, width) uint8

    def __post_init__(self):
        arr = self.data
        if arr.dtype != np.uint8 or arr.ndim != 2:
            raise ValueError(f"RasterMask needs (h, w) uint8 data, got {arr.dtype} {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError("RasterMask must be at least 1x1")
        arr.flags.writeable = False

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    def is_binary(self) -> bool:
        return bool(np.isin(self.data, (0, 255)).all())

    def count_positive(self) -> int:
        return int(np.count_nonzero(self.data == 255))


@dataclass(frozen=True)
class BBox:
    """Axis-aligned pixel box, half-open on the max edges."""

    x_min: int
    y_min: int
    x_max: int
    y_max: int
    class_id: int = 0
    confidence: float = 1.0

    def __post_init__(self):
        if not (0 <= self.x_min < self.x_max and 0 <= self.y_min < self.y_max):
            raise ValueError(f"degenerate box {self.as_list()}")
        if not (0.0 <= self.confidence <= 1.0):
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")

    @property
    def width(self) -> int:
        return self.x_max - self.x_min

    @property
    def height(self) -> int:
        return self.y_max - self.y_min

    def area(self) -> int:
        return self.width * self.height

    def clipped(self, width: int, height: int) -> "BBox | None":
        """Intersect with the frame; None if nothing remains."""
        x0, y0 = max(self.x_min, 0), max(self.y_min, 0)
        x1, y1 = min(self.x_max, width), min(self.y_max, height)
        if x0 >= x1 or y0 >= y1:
            return None
        return replace(self, x_min=x0, y_min=y0, x_max=x1, y_max=y1)

    def grown(self, margin: int) -> "BBox":
        return replace(
            self,
            x_min=max(0, self.x_min - margin),
            y_min=max(0, self.y_min - margin),
            x_max=self.x_max + margin,
            y_max=self.y_max + margin,
        )

    def as_list(self) -> list:
        return [self.x_min, self.y_min, self.x_max, self.y_max, self.class_id, self.confidence]

    @classmethod
    def from_list(cls, values) -> "BBox":
        if len(values) != 6:
            raise ValueError(f"box array needs 6 entries, got {len(values)}")
        x0, y0, x1, y1, cid, conf = values
        return cls(int(x0), int(y0), int(x1), int(y1), int(cid), float(conf))


@dataclass
class FrameRecord:
    """One dataset frame: clear/occluded images, lane ground truth, occlusion boxes."""

    id: str
    clear_image: str
    lane_mask: str
    occluded_image: str | None = None
    occlusion_boxes: list[BBox] = field(default_factory=list)
    road_roi: list[tuple[float, float]] | None = None
    seed: int = 0
    source: str = ""


@dataclass
class DatasetManifest:
    """Index of frames plus the class list; `base_dir` resolves the relative paths."""

    frames: list[FrameRecord]
    class_names: list[str] = field(default_factory=lambda: list(TRAFFIC_CLASSES))
    schema_version: int = MANIFEST_SCHEMA_VERSION
    base_dir: str = "."  # not serialized; set from the manifest's location

    def resolve(self, rel_path: str) -> str:
        return os.path.normpath(os.path.join(self.base_dir, rel_path))

    def frame_ids(self) -> list[str]:
        return [f.id for f in self.frames]


# ---------------------------------------------------------------------------
# Raster I/O


def load_raster(path: str) -> RasterImage | RasterMask:
    """Load an 8-bit PNG: 3 channels become a RasterImage, 1 channel a RasterMask."""
    if not os.path.isfile(path):
        raise FileNotFoundError(f"raster file not found: {path}")
    try:
        with Image.open(path) as im:
            mode = im.mode
            arr = np.asarray(im)
    except Exception as exc:  # decode failure
        raise ValueError(f"cannot decode {path}: {exc}") from exc
    if mode == "RGB":
        return RasterImage(np.ascontiguousarray(arr, dtype=np.uint8))
    if mode == "L":
        return RasterMask(np.ascontiguousarray(arr, dtype=np.uint8))
    raise ValueError(f"unsupported PNG mode {mode!r} in {path} (need 8-bit RGB or L)")


def save_raster(raster: RasterImage | RasterMask, path: str) -> None:
    """Write a lossless PNG; load_raster inverts it byte-for-byte."""
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    mode = "RGB" if isinstance(raster, RasterImage) else "L"
    Image.fromarray(raster.data, mode=mode).save(path, format="PNG")


# ---------------------------------------------------------------------------
# Mask operations


def binarize(mask: RasterMask, threshold: int) -> RasterMask:
    """255 where sample >= threshold, else 0. Idempotent for binary inputs."""
    if not (0 <= threshold <= 255):
        raise ValueError(f"threshold {threshold} outside 0..255")
    out = np.where(mask.data >= threshold, 255, 0).astype(np.uint8)
    return RasterMask(out)


def dilate(mask: RasterMask, radius: int) -> RasterMask:
    """Chebyshev dilation with a (2r+1)x(2r+1) square structuring element."""
    if radius < 0:
        raise ValueError("radius must be >= 0")
    if radius == 0:
        return RasterMask(mask.data.copy())
    structure = np.ones((2 * radius + 1, 2 * radius + 1), dtype=bool)
    grown = ndi.binary_dilation(mask.data > 0, structure=structure)
    return RasterMask(np.where(grown, 255, 0).astype(np.uint8))


def polygon_mask(vertices, width: int, height: int) -> RasterMask:
    """Rasterize a polygon: pixel (x, y) is positive iff its center lies inside
    (even-odd rule). Vertices may be floats; the polygon is closed implicitly."""
    pts = [(float(x), float(y)) for x, y in vertices]
    if len(pts) < 3:
        raise ValueError("polygon needs at least 3 vertices")
    out = np.zeros((height, width), dtype=np.uint8)
    centers = np.arange(width) + 0.5
    n = len(pts)
    for row in range(height):
        ys = row + 0.5
        crossings = []
        for i in range(n):
            x1, y1 = pts[i]
            x2, y2 = pts[(i + 1) % n]
            if (y1 <= ys < y2) or (y2 <= ys < y1):
                t = (ys - y1) / (y2 - y1)
                crossings.append(x1 + t * (x2 - x1))
        if not crossings:
            continue
        crossings.sort()
        for j in range(0, len(crossings) - 1, 2):
            lo = int(np.searchsorted(centers, crossings[j]))
            hi = int(np.searchsorted(centers, crossings[j + 1]))
            out[row, lo:hi] = 255
    return RasterMask(out)


# ---------------------------------------------------------------------------
# Manifest I/O


def _frame_to_dict(frame: FrameRecord) -> dict:
    return {
        "id": frame.id,
        "clear_image": frame.clear_image,
        "occluded_image": frame.occluded_image,
        "lane_mask": frame.lane_mask,
        "occlusion_boxes": [b.as_list() for b in frame.occlusion_boxes],
        "road_roi": [[float(x), float(y)] for x, y in frame.road_roi] if frame.road_roi else None,
        "seed": frame.seed,
        "source": frame.source,
    }


def _frame_from_dict(obj: dict) -> FrameRecord:
    try:
        boxes = [BBox.from_list(b) for b in obj.get("occlusion_boxes", [])]
        roi = obj.get("road_roi")
        return FrameRecord(
            id=str(obj["id"]),
            clear_image=str(obj["clear_image"]),
            occluded_image=obj.get("occluded_image"),
            lane_mask=str(obj["lane_mask"]),
            occlusion_boxes=boxes,
            road_roi=[(float(x), float(y)) for x, y in roi] if roi else None,
            seed=int(obj.get("seed", 0)),
            source=str(obj.get("source", "")),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"bad frame record {obj.get('id', '<missing id>')!r}: {exc}") from exc


def write_manifest(manifest: DatasetManifest, path: str) -> None:
    """Deterministic serialization: sorted keys, two-space indent, trailing newline."""
    _validate_structure(manifest)
    doc = {
        "schema_version": manifest.schema_version,
        "class_names": list(manifest.class_names),
        "frames": [_frame_to_dict(f) for f in manifest.frames],
    }
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2)
        fh.write("\n")


def read_manifest(path: str, check_paths: bool = True) -> DatasetManifest:
    """Parse and validate a manifest. `check_paths=False` defers existence and
    image-bounds checks (lenient mode) but keeps all structural validation."""
    if not os.path.isfile(path):
        raise FileNotFoundError(f"manifest not found: {path}")
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}: invalid JSON: {exc}") from exc
    version = doc.get("schema_version")
    if version != MANIFEST_SCHEMA_VERSION:
        raise ManifestError(f"{path}: schema_version {version!r}, expected {MANIFEST_SCHEMA_VERSION}")
    class_names = doc.get("class_names") or list(TRAFFIC_CLASSES)
    frames = [_frame_from_dict(obj) for obj in doc.get("frames", [])]
    manifest = DatasetManifest(
        frames=frames,
        class_names=[str(c) for c in class_names],
        schema_version=version,
        base_dir=os.path.dirname(os.path.abspath(path)),
    )
    _validate_structure(manifest)
    if check_paths:
        _validate_paths(manifest)
    return manifest


def _validate_structure(manifest: DatasetManifest) -> None:
    seen = set()
    for frame in manifest.frames:
        if frame.id in seen:
            raise ManifestError(f"duplicate frame id {frame.id!r}")
        seen.add(frame.id)
        for box in frame.occlusion_boxes:
            if not (0 <= box.class_id < len(manifest.class_names)):
                raise ManifestError(f"frame {frame.id!r}: class_id {box.class_id} outside class list")


def _validate_paths(manifest: DatasetManifest) -> None:
    for frame in manifest.frames:
        paths = [frame.clear_image, frame.lane_mask]
        if frame.occluded_image:
            paths.append(frame.occluded_image)
        for rel in paths:
            full = manifest.resolve(rel)
            if not os.path.isfile(full):
                raise ManifestError(f"frame {frame.id!r}: missing file {full}")
        if frame.occlusion_boxes:
            with Image.open(manifest.resolve(frame.clear_image)) as im:
                width, height = im.size
            for box in frame.occlusion_boxes:
                if box.x_max > width or box.y_max > height:
                    raise ManifestError(
                        f"frame {frame.id!r}: box {box.as_list()} outside {width}x{height} frame"
                    )


def luma(image: RasterImage) -> np.ndarray:
    """Rec.601 luma as float64, shape (h, w)."""
    rgb = image.data.astype(np.float64)
    return 0.299 * rgb[:, :, 0] + 0.587 * rgb[:, :, 1] + 0.114 * rgb[:, :, 2]


def euclidean_dist(ax: float, ay: float, bx: float, by: float) -> float:
    return math.hypot(ax - bx, ay - by)


def derive_seed(*parts) -> int:
    """Stable 63-bit sub-seed from JSON-serializable parts. Independent draws
    for different (seed, label) pairs without consuming a shared stream."""
    blob = json.dumps(parts, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return int.from_bytes(hashlib.sha256(blob).digest()[:8], "big") >> 1
