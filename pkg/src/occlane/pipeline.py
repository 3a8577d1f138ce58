"""Per-frame orchestration of detect -> boxes_to_mask -> inpaint -> segment,
dataset runs over a frame-parallel worker pool, the four-condition occlusion
ablation, and report / panel / figure emission.

Stage failures degrade per frame: the run finishes, the frame is reported
failed with the stage that broke it. Only structural problems (empty manifest,
inconsistent config) raise.
"""

from __future__ import annotations

import json
import logging
import os
import statistics
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from PIL import Image, ImageDraw

from . import nodeproto
from .core import (
    BBox,
    DatasetManifest,
    FrameRecord,
    RasterImage,
    RasterMask,
    TRAFFIC_CLASSES,
    binarize,
    dilate,
    load_raster,
    save_raster,
)
from .detect import DetectorConfig, boxes_to_mask, detect_diff, detect_oracle
from .inpaint import InpaintConfig, inpaint_image
from .lanes import LaneFinderConfig, lane_config_from_dict, lane_config_to_dict, segment_lanes
from .metrics import AggregateScores, PixelConfusion, PixelScores, aggregate, pixel_confusion, pixel_scores
from .nodeproto import NodeHandle, NodeRequest, call, shutdown, spawn_node

log = logging.getLogger(__name__)

CONDITIONS = ("clear", "occluded", "inpainted_detector", "inpainted_gt")
STAGES = ("detect", "inpaint", "segment")
CSV_COLUMNS = ("IOU", "Precision", "Recall", "Dice")

_LABEL_BAND = 16  # pixel strip above panel tiles where captions are drawn
_PANEL_PAD = 2


# ---------------------------------------------------------------------------
# Configuration


@dataclass(frozen=True)
class ExternalNodeSpec:
    """Command line for an out-of-process stage node, plus static params merged
    into every request sent to it."""

    command: tuple[str, ...]
    role: str
    timeout: float = nodeproto.CALL_TIMEOUT
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if isinstance(self.command, (str, bytes)) or not self.command:
            raise ValueError("command must be a non-empty argument sequence")
        object.__setattr__(self, "command", tuple(str(c) for c in self.command))
        if self.role not in nodeproto.NODE_ROLES:
            raise ValueError(f"role must be one of {nodeproto.NODE_ROLES}, got {self.role!r}")
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")


@dataclass(frozen=True)
class PipelineConfig:
    """Everything one run needs: the three stage configs, external node
    commands where a stage is out-of-process, and evaluation knobs."""

    detector: DetectorConfig = field(default_factory=DetectorConfig)
    inpainter: InpaintConfig = field(default_factory=InpaintConfig)
    segmenter: LaneFinderConfig | ExternalNodeSpec = field(default_factory=LaneFinderConfig)
    detect_node: ExternalNodeSpec | None = None
    inpaint_node: ExternalNodeSpec | None = None
    mask_binarize_threshold: int = 128
    eval_dilation: int = 0
    workers: int = 1

    def __post_init__(self):
        if not (0 <= self.mask_binarize_threshold <= 255):
            raise ValueError("mask_binarize_threshold outside 0..255")
        if self.eval_dilation < 0:
            raise ValueError("eval_dilation must be >= 0")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.detector.mode == "external":
            if self.detect_node is None:
                raise ValueError("detector mode 'external' needs detect_node")
        elif self.detect_node is not None:
            raise ValueError(f"detect_node set but detector mode is {self.detector.mode!r}")
        if self.detect_node is not None and self.detect_node.role != "detect":
            raise ValueError(f"detect_node role must be 'detect', got {self.detect_node.role!r}")
        if self.inpainter.mode == "external":
            if self.inpaint_node is None:
                raise ValueError("inpainter mode 'external' needs inpaint_node")
        elif self.inpaint_node is not None:
            raise ValueError(f"inpaint_node set but inpainter mode is {self.inpainter.mode!r}")
        if self.inpaint_node is not None and self.inpaint_node.role != "inpaint":
            raise ValueError(f"inpaint_node role must be 'inpaint', got {self.inpaint_node.role!r}")
        if isinstance(self.segmenter, ExternalNodeSpec):
            if self.segmenter.role != "segment":
                raise ValueError(f"segmenter node role must be 'segment', got {self.segmenter.role!r}")
        elif not isinstance(self.segmenter, LaneFinderConfig):
            raise TypeError("segmenter must be a LaneFinderConfig or an ExternalNodeSpec")


# ---------------------------------------------------------------------------
# Results


@dataclass
class PipelineResult:
    """Everything one frame produced; `failed_stage` is None on success."""

    frame_id: str
    boxes: list[BBox] = field(default_factory=list)
    occlusion_mask: RasterMask | None = None
    inpainted: RasterImage | None = None
    predicted_mask: RasterMask | None = None
    timings_ms: dict = field(default_factory=dict)  # stage name -> milliseconds
    total_ms: float = 0.0
    confusion: PixelConfusion | None = None
    scores: PixelScores | None = None
    failed_stage: str | None = None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.failed_stage is None


@dataclass
class RunReport:
    """run_dataset output: per-frame results (sorted by id) plus aggregates."""

    results: list
    aggregate: AggregateScores | None
    timing_stats: dict  # stage -> {"mean_ms", "median_ms"} over successful frames
    failures: dict  # frame id -> "stage: message"
    n_frames: int
    n_failed: int
    config: dict
    wall_ms: float = 0.0

    @property
    def too_many_failures(self) -> bool:
        return self.n_failed * 2 > self.n_frames


@dataclass
class AblationReport:
    """Four segmentation conditions scored on one identical frame set."""

    conditions: dict  # condition -> AggregateScores over `frame_ids`
    per_frame: dict  # frame id -> {condition: PipelineResult}
    frame_ids: list  # frames that succeeded under every condition
    excluded: dict  # frame id -> missing asset that kept it out of all conditions
    failed: dict  # frame id -> {condition: "stage: message"}
    config: dict
    corpus_seed: int | None = None


class _StageFailure(Exception):
    def __init__(self, stage: str, message: str):
        self.stage = stage
        self.message = message
        super().__init__(f"{stage}: {message}")


# ---------------------------------------------------------------------------
# External node handles


class StageNodes:
    """Per-worker cache of spawned node handles, one per role. A handle
    poisoned by a timeout is replaced on the next request so a single bad
    frame does not take down the rest of the run."""

    def __init__(self):
        self._handles: dict[str, NodeHandle] = {}

    def handle(self, spec: ExternalNodeSpec) -> NodeHandle:
        h = self._handles.get(spec.role)
        if h is not None and h.poisoned:
            shutdown(h)
            h = None
        if h is None:
            h = spawn_node(list(spec.command), spec.role)
            self._handles[spec.role] = h
        return h

    def close(self) -> None:
        for h in self._handles.values():
            shutdown(h)
        self._handles.clear()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


def _node_call(nodes: StageNodes, spec: ExternalNodeSpec, stage: str, inputs: dict, params: dict):
    """One request/response against the cached handle for `spec`; every way it
    can go wrong becomes a _StageFailure attributed to `stage`."""
    try:
        handle = nodes.handle(spec)
        req = NodeRequest(role=spec.role, inputs=inputs, scratch_dir=handle.scratch_dir,
                          params={**params, **spec.params})
        resp = call(handle, req, timeout=spec.timeout)
    except nodeproto.NodeError as exc:
        raise _StageFailure(stage, str(exc))
    if not resp.ok:
        raise _StageFailure(stage, f"node error: {resp.message}")
    return handle, resp


# ---------------------------------------------------------------------------
# Stages


def _ms(t0: float) -> float:
    return (time.monotonic() - t0) * 1000.0


def _resolve(base_dir: str, rel: str) -> str:
    return os.path.normpath(os.path.join(base_dir, rel))


def _load_image(path: str, what: str) -> RasterImage:
    try:
        raster = load_raster(path)
    except (OSError, ValueError) as exc:
        raise _StageFailure("load", f"{what}: {exc}")
    if not isinstance(raster, RasterImage):
        raise _StageFailure("load", f"{what} {path} is not a 3-channel image")
    return raster


def _detect_stage(frame: FrameRecord, source_path: str, occluded: RasterImage,
                  clear_image, cfg: PipelineConfig, nodes: StageNodes) -> list[BBox]:
    det = cfg.detector
    try:
        if det.mode == "oracle":
            # The oracle refuses frames without ground-truth boxes, but an
            # unoccluded frame legitimately has none: nothing to detect.
            return detect_oracle(frame, det) if frame.occlusion_boxes else []
        if det.mode == "diff":
            return detect_diff(occluded, clear_image(), det)
    except _StageFailure:
        raise
    except Exception as exc:
        raise _StageFailure("detect", str(exc))

    _, resp = _node_call(nodes, cfg.detect_node, "detect",
                         inputs={"image": source_path},
                         params={"frame_id": frame.id, "conf_threshold": det.conf_threshold})
    if resp.boxes is None:
        raise _StageFailure("detect", "node response carries outputs, expected boxes")
    try:
        boxes = [BBox.from_list(b) for b in resp.boxes]
    except (TypeError, ValueError) as exc:
        raise _StageFailure("detect", f"bad box from node: {exc}")
    return [b for b in boxes
            if b.confidence >= det.conf_threshold and b.class_id in det.class_filter]


def _inpaint_stage(frame: FrameRecord, source_path: str, occluded: RasterImage,
                   hole: RasterMask, clear_image, cfg: PipelineConfig,
                   nodes: StageNodes, base_dir: str) -> RasterImage:
    inp = cfg.inpainter
    if inp.mode != "external":
        try:
            clear = clear_image() if inp.mode == "oracle" else None
            out = inpaint_image(occluded, hole, inp, clear=clear)
        except _StageFailure:
            raise
        except Exception as exc:
            raise _StageFailure("inpaint", str(exc))
    else:
        handle = None
        try:
            handle = nodes.handle(cfg.inpaint_node)
        except nodeproto.NodeError as exc:
            raise _StageFailure("inpaint", str(exc))
        hole_path = os.path.join(handle.scratch_dir, f"{frame.id}_hole.png")
        save_raster(hole, hole_path)
        params = {"frame_id": frame.id}
        if frame.clear_image:
            params["clear_image"] = _resolve(base_dir, frame.clear_image)
        _, resp = _node_call(nodes, cfg.inpaint_node, "inpaint",
                             inputs={"image": source_path, "mask": hole_path}, params=params)
        if not resp.outputs or "image" not in resp.outputs:
            raise _StageFailure("inpaint", "node response lacks an 'image' output")
        out = _load_image(resp.outputs["image"], "inpainted frame")
    if out.data.shape != occluded.data.shape:
        raise _StageFailure(
            "inpaint", f"output shape {out.data.shape} != input {occluded.data.shape}")
    return out


def _segment_stage(frame: FrameRecord, image: RasterImage, cfg: PipelineConfig,
                   nodes: StageNodes) -> RasterMask:
    seg = cfg.segmenter
    if isinstance(seg, LaneFinderConfig):
        if seg.roi is None:
            if frame.road_roi is None:
                raise _StageFailure(
                    "segment", "no ROI: segmenter config and frame both lack a road polygon")
            seg = seg.with_roi(frame.road_roi)
        try:
            mask, _model = segment_lanes(image, seg)
        except Exception as exc:
            raise _StageFailure("segment", str(exc))
    else:
        handle = None
        try:
            handle = nodes.handle(seg)
        except nodeproto.NodeError as exc:
            raise _StageFailure("segment", str(exc))
        img_path = os.path.join(handle.scratch_dir, f"{frame.id}_to_segment.png")
        save_raster(image, img_path)
        params = {"frame_id": frame.id}
        if frame.road_roi is not None:
            params["road_roi"] = [[float(x), float(y)] for x, y in frame.road_roi]
        _, resp = _node_call(nodes, seg, "segment", inputs={"image": img_path}, params=params)
        if not resp.outputs or "mask" not in resp.outputs:
            raise _StageFailure("segment", "node response lacks a 'mask' output")
        try:
            raw = load_raster(resp.outputs["mask"])
        except (OSError, ValueError) as exc:
            raise _StageFailure("segment", f"mask output: {exc}")
        if not isinstance(raw, RasterMask):
            raise _StageFailure("segment", "node mask output is not single-channel")
        mask = binarize(raw, cfg.mask_binarize_threshold)
    if mask.data.shape != image.data.shape[:2]:
        raise _StageFailure(
            "segment", f"mask shape {mask.data.shape} != frame {image.data.shape[:2]}")
    return mask


def _ground_truth(frame: FrameRecord, cfg: PipelineConfig, base_dir: str) -> RasterMask:
    try:
        raw = load_raster(_resolve(base_dir, frame.lane_mask))
    except (OSError, ValueError) as exc:
        raise _StageFailure("score", f"lane mask: {exc}")
    if not isinstance(raw, RasterMask):
        raise _StageFailure("score", "lane mask is not single-channel")
    gt = binarize(raw, cfg.mask_binarize_threshold)
    if cfg.eval_dilation > 0:
        gt = dilate(gt, cfg.eval_dilation)
    return gt


def _score_prediction(pred: RasterMask, frame: FrameRecord, cfg: PipelineConfig, base_dir: str):
    gt = _ground_truth(frame, cfg, base_dir)
    if gt.data.shape != pred.data.shape:
        raise _StageFailure(
            "score", f"ground truth shape {gt.data.shape} != prediction {pred.data.shape}")
    conf = pixel_confusion(pred, gt)
    return conf, pixel_scores(conf)


# ---------------------------------------------------------------------------
# Per-frame runs


def run_frame(frame: FrameRecord, cfg: PipelineConfig, base_dir: str = ".",
              nodes: StageNodes | None = None) -> PipelineResult:
    """Full pipeline on one frame: detect occluders on the occluded image (the
    clear one when no occluded image exists), mask them, inpaint, segment,
    score against ground truth. Never raises for per-frame problems."""
    owned = nodes is None
    nodes = nodes or StageNodes()
    result = PipelineResult(frame_id=frame.id)
    t_start = time.monotonic()
    try:
        source_rel = frame.occluded_image or frame.clear_image
        source_path = _resolve(base_dir, source_rel)
        occluded = _load_image(source_path, "source frame")

        cache: dict[str, RasterImage] = {}

        def clear_image() -> RasterImage:
            if "clear" not in cache:
                cache["clear"] = _load_image(_resolve(base_dir, frame.clear_image), "clear frame")
            return cache["clear"]

        t0 = time.monotonic()
        boxes = _detect_stage(frame, source_path, occluded, clear_image, cfg, nodes)
        hole = boxes_to_mask(boxes, occluded.width, occluded.height, cfg.detector.box_dilation)
        result.timings_ms["detect"] = _ms(t0)
        result.boxes = boxes
        result.occlusion_mask = hole

        t0 = time.monotonic()
        inpainted = _inpaint_stage(frame, source_path, occluded, hole, clear_image,
                                   cfg, nodes, base_dir)
        result.timings_ms["inpaint"] = _ms(t0)
        result.inpainted = inpainted

        t0 = time.monotonic()
        pred = _segment_stage(frame, inpainted, cfg, nodes)
        result.timings_ms["segment"] = _ms(t0)
        result.predicted_mask = pred

        result.confusion, result.scores = _score_prediction(pred, frame, cfg, base_dir)
    except _StageFailure as exc:
        result.failed_stage, result.error = exc.stage, exc.message
        log.warning("frame %s failed at %s: %s", frame.id, exc.stage, exc.message)
    finally:
        result.total_ms = _ms(t_start)
        if owned:
            nodes.close()
    return result


def segment_only(frame: FrameRecord, image_rel: str, cfg: PipelineConfig,
                 base_dir: str = ".", nodes: StageNodes | None = None) -> PipelineResult:
    """Segment one image directly (no detect/inpaint) and score it; this is
    what the 'clear' and 'occluded' ablation conditions run."""
    owned = nodes is None
    nodes = nodes or StageNodes()
    result = PipelineResult(frame_id=frame.id)
    t_start = time.monotonic()
    try:
        image = _load_image(_resolve(base_dir, image_rel), "frame")
        t0 = time.monotonic()
        pred = _segment_stage(frame, image, cfg, nodes)
        result.timings_ms["segment"] = _ms(t0)
        result.predicted_mask = pred
        result.confusion, result.scores = _score_prediction(pred, frame, cfg, base_dir)
    except _StageFailure as exc:
        result.failed_stage, result.error = exc.stage, exc.message
        log.warning("frame %s (segment-only) failed at %s: %s", frame.id, exc.stage, exc.message)
    finally:
        result.total_ms = _ms(t_start)
        if owned:
            nodes.close()
    return result


# ---------------------------------------------------------------------------
# Dataset runs


def _map_frames(frames, workers: int, job) -> dict:
    """job(frame, nodes) -> value, mapped over frames. Each worker thread owns
    its node handles; results are keyed by frame id, so scheduling order can
    never leak into reports."""
    out = {}
    if workers == 1:
        with StageNodes() as nodes:
            for fr in frames:
                out[fr.id] = job(fr, nodes)
        return out

    local = threading.local()
    created: list[StageNodes] = []
    lock = threading.Lock()

    def wrapped(fr):
        nodes = getattr(local, "nodes", None)
        if nodes is None:
            nodes = StageNodes()
            local.nodes = nodes
            with lock:
                created.append(nodes)
        return fr.id, job(fr, nodes)

    try:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for fid, value in pool.map(wrapped, frames):
                out[fid] = value
    finally:
        for nodes in created:
            nodes.close()
    return out


def run_dataset(manifest: DatasetManifest, cfg: PipelineConfig) -> RunReport:
    """Run the full pipeline over every manifest frame. Deterministic given
    manifest + config: the worker count changes wall time only."""
    if not manifest.frames:
        raise ValueError("manifest has no frames")
    t_wall = time.monotonic()
    by_id = _map_frames(manifest.frames, cfg.workers,
                        lambda fr, nodes: run_frame(fr, cfg, base_dir=manifest.base_dir, nodes=nodes))
    results = [by_id[fid] for fid in sorted(by_id)]

    ok = [r for r in results if r.ok]
    failures = {r.frame_id: f"{r.failed_stage}: {r.error}" for r in results if not r.ok}
    agg = aggregate([r.confusion for r in ok]) if ok else None
    timing_stats = {}
    for stage in STAGES:
        vals = [r.timings_ms[stage] for r in ok if stage in r.timings_ms]
        if vals:
            timing_stats[stage] = {
                "mean_ms": float(statistics.fmean(vals)),
                "median_ms": float(statistics.median(vals)),
            }
    return RunReport(results=results, aggregate=agg, timing_stats=timing_stats,
                     failures=failures, n_frames=len(results), n_failed=len(failures),
                     config=pipeline_config_to_dict(cfg), wall_ms=_ms(t_wall))


def run_ablation(manifest: DatasetManifest, cfg: PipelineConfig,
                 corpus_seed: int | None = None) -> AblationReport:
    """Score the same segmenter under four conditions per frame: the clear
    image, the occluded image, the pipeline with cfg's detector, and the
    pipeline with ground-truth boxes (class filter open, same box dilation, so
    box accuracy is the only difference between the last two)."""
    if not manifest.frames:
        raise ValueError("manifest has no frames")

    eligible, excluded = [], {}
    for fr in manifest.frames:
        if fr.occluded_image is None:
            excluded[fr.id] = "occluded_image"
        elif not fr.occlusion_boxes:
            excluded[fr.id] = "occlusion_boxes"
        else:
            eligible.append(fr)
    if not eligible:
        raise ValueError("no frame carries all ablation assets (clear, occluded, mask, boxes)")

    gt_detector = replace(cfg.detector, mode="oracle",
                          class_filter=frozenset(range(len(TRAFFIC_CLASSES))))
    gt_cfg = replace(cfg, detector=gt_detector, detect_node=None)
    base = manifest.base_dir

    def frame_job(fr, nodes):
        return {
            "clear": segment_only(fr, fr.clear_image, cfg, base_dir=base, nodes=nodes),
            "occluded": segment_only(fr, fr.occluded_image, cfg, base_dir=base, nodes=nodes),
            "inpainted_detector": run_frame(fr, cfg, base_dir=base, nodes=nodes),
            "inpainted_gt": run_frame(fr, gt_cfg, base_dir=base, nodes=nodes),
        }

    by_id = _map_frames(eligible, cfg.workers, frame_job)
    per_frame = {fid: by_id[fid] for fid in sorted(by_id)}

    failed = {}
    for fid, conds in per_frame.items():
        bad = {c: f"{r.failed_stage}: {r.error}" for c, r in conds.items() if not r.ok}
        if bad:
            failed[fid] = bad
    # A frame failing any condition leaves the aggregate of every condition,
    # keeping the four aggregates comparable on one identical frame set.
    frame_ids = [fid for fid in per_frame if fid not in failed]
    if not frame_ids:
        raise ValueError("every frame failed at least one ablation condition")

    conditions = {
        cond: aggregate([per_frame[fid][cond].confusion for fid in frame_ids])
        for cond in CONDITIONS
    }
    return AblationReport(conditions=conditions, per_frame=per_frame, frame_ids=frame_ids,
                          excluded=excluded, failed=failed,
                          config=pipeline_config_to_dict(cfg), corpus_seed=corpus_seed)


# ---------------------------------------------------------------------------
# Emission: panels, reports, figures


def emit_panel(entries, path: str) -> None:
    """Compose labeled rasters into one side-by-side PNG.

    entries: ordered (label, RasterImage | RasterMask) pairs -- by convention
    original, ground truth, then one tile per prediction. Mixed sizes are
    letterboxed onto the tallest tile, never resampled.
    """
    if len(entries) < 2:
        raise ValueError("panel needs at least two rasters")
    tiles = []
    for label, raster in entries:
        arr = raster.data
        if arr.ndim == 2:
            arr = np.repeat(arr[:, :, None], 3, axis=2)
        tiles.append((str(label), arr))

    tile_h = max(a.shape[0] for _, a in tiles)
    width = sum(a.shape[1] for _, a in tiles) + _PANEL_PAD * (len(tiles) + 1)
    canvas = np.zeros((_LABEL_BAND + tile_h + _PANEL_PAD, width, 3), dtype=np.uint8)
    x = _PANEL_PAD
    anchors = []
    for label, arr in tiles:
        y0 = _LABEL_BAND + (tile_h - arr.shape[0]) // 2
        canvas[y0:y0 + arr.shape[0], x:x + arr.shape[1]] = arr
        anchors.append((label, x))
        x += arr.shape[1] + _PANEL_PAD

    img = Image.fromarray(canvas, mode="RGB")
    draw = ImageDraw.Draw(img)
    for label, x0 in anchors:
        draw.text((x0 + 1, 2), label, fill=(255, 220, 0))
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    img.save(path, format="PNG")


def _fmt(value) -> str:
    return "" if value is None else f"{value:.6f}"


def _score_cells(scores: PixelScores | None) -> list[str]:
    if scores is None:
        return ["", "", "", ""]
    return [_fmt(scores.iou), _fmt(scores.precision), _fmt(scores.recall), _fmt(scores.dice)]


def _csv_text(header: list[str], rows: list[list[str]]) -> str:
    lines = [",".join(header)]
    lines += [",".join(row) for row in rows]
    return "\n".join(lines) + "\n"


def _report_csv(report) -> str:
    if isinstance(report, AblationReport):
        rows = [[cond] + _score_cells(report.conditions[cond].macro) for cond in CONDITIONS]
        return _csv_text(["condition", *CSV_COLUMNS], rows)
    if isinstance(report, RunReport):
        rows = [[r.frame_id] + _score_cells(r.scores) for r in report.results]
        if report.aggregate is not None:
            rows.append(["macro"] + _score_cells(report.aggregate.macro))
            rows.append(["micro"] + _score_cells(report.aggregate.micro))
        return _csv_text(["frame", *CSV_COLUMNS], rows)
    raise TypeError(f"cannot render {type(report).__name__} as CSV")


def _aggregate_to_dict(agg: AggregateScores | None) -> dict | None:
    if agg is None:
        return None
    return {
        "macro": agg.macro.as_dict(),
        "micro": agg.micro.as_dict(),
        "excluded": dict(agg.excluded),
        "n_frames": agg.n_frames,
    }


def result_to_dict(r: PipelineResult, include_timings: bool = True) -> dict:
    conf = None
    if r.confusion is not None:
        conf = {"tp": r.confusion.tp, "fp": r.confusion.fp,
                "fn": r.confusion.fn, "tn": r.confusion.tn}
    out = {
        "frame_id": r.frame_id,
        "boxes": [b.as_list() for b in r.boxes],
        "scores": r.scores.as_dict() if r.scores is not None else None,
        "confusion": conf,
        "failed_stage": r.failed_stage,
        "error": r.error,
    }
    if include_timings:
        out["timings_ms"] = {k: round(v, 3) for k, v in r.timings_ms.items()}
        out["total_ms"] = round(r.total_ms, 3)
    return out


def report_to_dict(report) -> dict:
    if isinstance(report, RunReport):
        return {
            "kind": "run",
            "aggregate": _aggregate_to_dict(report.aggregate),
            "timing_stats": report.timing_stats,
            "failures": dict(report.failures),
            "n_frames": report.n_frames,
            "n_failed": report.n_failed,
            "wall_ms": round(report.wall_ms, 3),
            "config": report.config,
            "results": [result_to_dict(r) for r in report.results],
        }
    if isinstance(report, AblationReport):
        return {
            "kind": "ablation",
            "conditions": {c: _aggregate_to_dict(report.conditions[c]) for c in CONDITIONS},
            # ablation compares condition quality; wall timings would make
            # otherwise-identical reruns differ, so they stay out of this view
            "per_frame": {
                fid: {cond: result_to_dict(res, include_timings=False)
                      for cond, res in conds.items()}
                for fid, conds in report.per_frame.items()
            },
            "frame_ids": list(report.frame_ids),
            "excluded": dict(report.excluded),
            "failed": report.failed,
            "config": report.config,
            "corpus_seed": report.corpus_seed,
        }
    raise TypeError(f"cannot serialize {type(report).__name__}")


def emit_report(report, path: str, fmt: str = "csv") -> None:
    """Write a report as CSV (columns IOU, Precision, Recall, Dice) or JSON
    (full per-frame detail plus config snapshot). Same report, same bytes."""
    if fmt == "csv":
        text = _report_csv(report)
    elif fmt == "json":
        text = json.dumps(report_to_dict(report), indent=2, sort_keys=True) + "\n"
    else:
        raise ValueError(f"format must be 'csv' or 'json', got {fmt!r}")
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def emit_figure(report, path: str) -> None:
    """Render the report's headline numbers as a bar-chart PNG next to the
    delimited output: per-condition macro scores for an ablation, macro vs
    micro for a dataset run."""
    import matplotlib

    matplotlib.use("Agg", force=True)
    import matplotlib.pyplot as plt

    if isinstance(report, AblationReport):
        groups = [(cond, report.conditions[cond].macro) for cond in CONDITIONS]
        title = "Segmentation by condition (macro)"
    elif isinstance(report, RunReport):
        groups = []
        if report.aggregate is not None:
            groups = [("macro", report.aggregate.macro), ("micro", report.aggregate.micro)]
        title = f"Dataset run, {report.n_frames} frames ({report.n_failed} failed)"
    else:
        raise TypeError(f"cannot plot {type(report).__name__}")

    attrs = [("IOU", "iou"), ("Precision", "precision"), ("Recall", "recall"), ("Dice", "dice")]
    fig, ax = plt.subplots(figsize=(6.4, 3.6), dpi=100)
    xs = np.arange(len(groups))
    width = 0.2
    for i, (label, attr) in enumerate(attrs):
        vals = [getattr(scores, attr) or 0.0 for _, scores in groups]
        ax.bar(xs + (i - 1.5) * width, vals, width, label=label)
    ax.set_xticks(xs)
    ax.set_xticklabels([name for name, _ in groups], fontsize=8)
    ax.set_ylim(0.0, 1.05)
    ax.set_title(title, fontsize=9)
    if groups:
        ax.legend(fontsize=7, ncol=4, loc="lower right")
    fig.tight_layout()
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)


# ---------------------------------------------------------------------------
# Config serialization


def _node_spec_to_dict(spec: ExternalNodeSpec) -> dict:
    return {"command": list(spec.command), "role": spec.role,
            "timeout": spec.timeout, "params": dict(spec.params)}


def _node_spec_from_dict(obj: dict) -> ExternalNodeSpec:
    return ExternalNodeSpec(command=tuple(obj["command"]), role=obj["role"],
                            timeout=float(obj.get("timeout", nodeproto.CALL_TIMEOUT)),
                            params=dict(obj.get("params", {})))


def pipeline_config_to_dict(cfg: PipelineConfig) -> dict:
    det = asdict(cfg.detector)
    det["class_filter"] = sorted(cfg.detector.class_filter)
    if isinstance(cfg.segmenter, LaneFinderConfig):
        seg = lane_config_to_dict(cfg.segmenter)
    else:
        seg = {"external": _node_spec_to_dict(cfg.segmenter)}
    out = {
        "detector": det,
        "inpainter": asdict(cfg.inpainter),
        "segmenter": seg,
        "mask_binarize_threshold": cfg.mask_binarize_threshold,
        "eval_dilation": cfg.eval_dilation,
        "workers": cfg.workers,
    }
    if cfg.detect_node is not None:
        out["detect_node"] = _node_spec_to_dict(cfg.detect_node)
    if cfg.inpaint_node is not None:
        out["inpaint_node"] = _node_spec_to_dict(cfg.inpaint_node)
    return out


def pipeline_config_from_dict(obj: dict) -> PipelineConfig:
    kwargs = {}
    if "detector" in obj:
        det = dict(obj["detector"])
        if "class_filter" in det:
            det["class_filter"] = frozenset(det["class_filter"])
        kwargs["detector"] = DetectorConfig(**det)
    if "inpainter" in obj:
        kwargs["inpainter"] = InpaintConfig(**obj["inpainter"])
    if "segmenter" in obj:
        seg = obj["segmenter"]
        if "external" in seg:
            kwargs["segmenter"] = _node_spec_from_dict(seg["external"])
        else:
            kwargs["segmenter"] = lane_config_from_dict(seg)
    for key in ("detect_node", "inpaint_node"):
        if obj.get(key) is not None:
            kwargs[key] = _node_spec_from_dict(obj[key])
    for key in ("mask_binarize_threshold", "eval_dilation", "workers"):
        if key in obj:
            kwargs[key] = obj[key]
    return PipelineConfig(**kwargs)
