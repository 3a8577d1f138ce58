"""Occlusion-aware lane detection: synthetic scenes, occluder augmentation,
detect/inpaint/segment stages, and pixel/box evaluation."""

from occlane.core import (
    BBox,
    DatasetManifest,
    FrameRecord,
    ManifestError,
    RasterImage,
    RasterMask,
    TRAFFIC_CLASSES,
    binarize,
    dilate,
    load_raster,
    polygon_mask,
    read_manifest,
    save_raster,
    write_manifest,
)
from occlane.augment import PlacementPolicy, build_augmented_dataset, builtin_sprites
from occlane.detect import DetectorConfig, boxes_to_mask, detect_diff, detect_oracle
from occlane.inpaint import InpaintConfig, inpaint_image
from occlane.lanes import LaneFinderConfig, segment_lanes
from occlane.metrics import (
    AggregateScores,
    PixelConfusion,
    PixelScores,
    aggregate,
    average_precision,
    box_ciou,
    box_iou,
    map50_95,
    pixel_confusion,
    pixel_scores,
)
from occlane.pipeline import (
    AblationReport,
    ExternalNodeSpec,
    PipelineConfig,
    PipelineResult,
    RunReport,
    emit_figure,
    emit_panel,
    emit_report,
    run_ablation,
    run_dataset,
    run_frame,
)
from occlane.synthgen import SceneConfig, generate_corpus, generate_scene

__version__ = "0.1.0"

__all__ = [
    "AblationReport",
    "AggregateScores",
    "BBox",
    "DatasetManifest",
    "DetectorConfig",
    "ExternalNodeSpec",
    "FrameRecord",
    "InpaintConfig",
    "LaneFinderConfig",
    "ManifestError",
    "PipelineConfig",
    "PipelineResult",
    "PixelConfusion",
    "PixelScores",
    "PlacementPolicy",
    "RasterImage",
    "RasterMask",
    "RunReport",
    "SceneConfig",
    "TRAFFIC_CLASSES",
    "aggregate",
    "average_precision",
    "binarize",
    "box_ciou",
    "box_iou",
    "boxes_to_mask",
    "build_augmented_dataset",
    "builtin_sprites",
    "detect_diff",
    "detect_oracle",
    "dilate",
    "emit_figure",
    "emit_panel",
    "emit_report",
    "generate_corpus",
    "generate_scene",
    "inpaint_image",
    "load_raster",
    "map50_95",
    "pixel_confusion",
    "pixel_scores",
    "polygon_mask",
    "read_manifest",
    "run_ablation",
    "run_dataset",
    "run_frame",
    "save_raster",
    "segment_lanes",
    "write_manifest",
]
