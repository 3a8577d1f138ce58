"""Evaluation: pixel-level segmentation scores, box geometry (IoU/CIoU),
COCO-style mAP50-95 detection scoring, and inpainting fidelity probes.

Empty-set conventions: when prediction and ground truth are both empty, IoU and
Dice are 1.0 by convention and the result carries a flag so dataset means can
exclude such frames; precision/recall are None whenever their denominator is 0.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from occlane.core import BBox, RasterImage, RasterMask

MAP_THRESHOLDS = tuple(round(0.50 + 0.05 * i, 2) for i in range(10))
OPERATING_IOU = 0.5
OPERATING_CONF = 0.25
PSNR_CAP = 99.0


@dataclass(frozen=True)
class PixelConfusion:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion counts must be >= 0")

    def __add__(self, other: "PixelConfusion") -> "PixelConfusion":
        return PixelConfusion(
            self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn
        )

    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class PixelScores:
    iou: float | None
    dice: float | None
    precision: float | None
    recall: float | None
    both_empty: bool = False

    def as_dict(self) -> dict:
        return {
            "iou": self.iou,
            "dice": self.dice,
            "precision": self.precision,
            "recall": self.recall,
            "both_empty": self.both_empty,
        }


@dataclass(frozen=True)
class AggregateScores:
    macro: PixelScores
    micro: PixelScores
    excluded: dict
    n_frames: int


@dataclass(frozen=True)
class CIoUTerms:
    iou: float
    center_dist_sq: float
    enclosing_diag_sq: float
    aspect_term: float
    alpha: float
    ciou: float


@dataclass
class DetectionEval:
    ap_per_class: dict = field(default_factory=dict)  # class name -> {threshold: AP}
    precision: float | None = None
    recall: float | None = None
    map50_95: float | None = None


@dataclass(frozen=True)
class FidelityScores:
    l1_masked: float
    psnr_masked: float


# ---------------------------------------------------------------------------
# Pixel metrics


def pixel_confusion(pred: RasterMask, gt: RasterMask) -> PixelConfusion:
    if pred.data.shape != gt.data.shape:
        raise ValueError(f"shape mismatch {pred.data.shape} vs {gt.data.shape}")
    if not pred.is_binary() or not gt.is_binary():
        raise ValueError("pixel_confusion needs binary masks (0/255)")
    p = pred.data == 255
    g = gt.data == 255
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = int(np.count_nonzero(~p & ~g))
    return PixelConfusion(tp, fp, fn, tn)


def pixel_scores(c: PixelConfusion) -> PixelScores:
    both_empty = (c.tp + c.fp + c.fn) == 0
    if both_empty:
        iou: float | None = 1.0
        dice: float | None = 1.0
    else:
        iou = c.tp / (c.tp + c.fp + c.fn)
        dice = 2 * c.tp / (2 * c.tp + c.fp + c.fn)
    precision = c.tp / (c.tp + c.fp) if (c.tp + c.fp) > 0 else None
    recall = c.tp / (c.tp + c.fn) if (c.tp + c.fn) > 0 else None
    return PixelScores(iou=iou, dice=dice, precision=precision, recall=recall, both_empty=both_empty)


def aggregate(per_frame: list[PixelConfusion]) -> AggregateScores:
    """Macro = mean of defined per-frame scores (empty-vs-empty frames excluded,
    counts reported); micro = scores of the summed confusion."""
    if not per_frame:
        raise ValueError("aggregate needs at least one frame")
    scores = [pixel_scores(c) for c in per_frame]

    def mean_of(values):
        vals = [v for v in values if v is not None]
        return (sum(vals) / len(vals), len(values) - len(vals)) if vals else (None, len(values))

    iou_m, iou_ex = mean_of([None if s.both_empty else s.iou for s in scores])
    dice_m, dice_ex = mean_of([None if s.both_empty else s.dice for s in scores])
    prec_m, prec_ex = mean_of([s.precision for s in scores])
    rec_m, rec_ex = mean_of([s.recall for s in scores])
    macro = PixelScores(
        iou=iou_m,
        dice=dice_m,
        precision=prec_m,
        recall=rec_m,
        both_empty=all(s.both_empty for s in scores),
    )
    micro = pixel_scores(sum(per_frame, PixelConfusion()))
    excluded = {"iou": iou_ex, "dice": dice_ex, "precision": prec_ex, "recall": rec_ex}
    return AggregateScores(macro=macro, micro=micro, excluded=excluded, n_frames=len(per_frame))


# ---------------------------------------------------------------------------
# Box geometry


def box_iou(a: BBox, b: BBox) -> float:
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = a.area() + b.area() - inter
    return inter / union


def box_ciou(pred: BBox, gt: BBox) -> CIoUTerms:
    """Complete IoU: overlap minus normalized center distance minus an
    aspect-ratio consistency penalty."""
    iou = box_iou(pred, gt)
    pcx, pcy = (pred.x_min + pred.x_max) / 2.0, (pred.y_min + pred.y_max) / 2.0
    gcx, gcy = (gt.x_min + gt.x_max) / 2.0, (gt.y_min + gt.y_max) / 2.0
    rho_sq = (pcx - gcx) ** 2 + (pcy - gcy) ** 2
    cw = max(pred.x_max, gt.x_max) - min(pred.x_min, gt.x_min)
    ch = max(pred.y_max, gt.y_max) - min(pred.y_min, gt.y_min)
    c_sq = float(cw**2 + ch**2)
    v = (4.0 / math.pi**2) * (
        math.atan(gt.width / gt.height) - math.atan(pred.width / pred.height)
    ) ** 2
    alpha = v / ((1.0 - iou) + v + 1e-9)
    ciou = iou - rho_sq / c_sq - alpha * v
    return CIoUTerms(
        iou=iou,
        center_dist_sq=rho_sq,
        enclosing_diag_sq=c_sq,
        aspect_term=v,
        alpha=alpha,
        ciou=ciou,
    )


# ---------------------------------------------------------------------------
# Detection AP


def _greedy_match_flags(preds, gts, threshold):
    """preds: [(frame_key, BBox)] presorted by descending confidence; gts keyed
    by frame. Returns a TP/FP flag per prediction in that order."""
    gt_by_frame = defaultdict(list)
    for fk, g in gts:
        gt_by_frame[fk].append(g)
    taken = {fk: [False] * len(v) for fk, v in gt_by_frame.items()}
    flags = []
    for fk, p in preds:
        best_iou, best_j = 0.0, -1
        for j, g in enumerate(gt_by_frame.get(fk, ())):
            if taken[fk][j]:
                continue
            v = box_iou(p, g)
            if v > best_iou:
                best_iou, best_j = v, j
        if best_j >= 0 and best_iou >= threshold:
            taken[fk][best_j] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags


def _interpolated_ap(flags, n_gt):
    """101-point interpolated AP from ordered TP/FP flags."""
    if n_gt == 0:
        return 0.0
    if not flags:
        return 0.0
    tp_cum = np.cumsum([1 if f else 0 for f in flags])
    fp_cum = np.cumsum([0 if f else 1 for f in flags])
    recalls = tp_cum / n_gt
    precisions = tp_cum / (tp_cum + fp_cum)
    # precision envelope: best precision achievable at recall >= r
    envelope = np.maximum.accumulate(precisions[::-1])[::-1]
    rec_thresholds = np.arange(101) / 100.0
    idx = np.searchsorted(recalls, rec_thresholds, side="left")
    sampled = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return float(sampled.mean())


def _sorted_by_confidence(preds):
    """Descending confidence, stable so ties keep insertion order."""
    return sorted(preds, key=lambda pair: -pair[1].confidence)


def average_precision(preds: list[BBox], gts: list[BBox], iou_threshold: float) -> float | None:
    """Single-pool AP at one matching threshold. None when ground truth and
    predictions are both empty (defined-empty, excluded from means)."""
    if not gts:
        return None if not preds else 0.0
    keyed_preds = _sorted_by_confidence([(0, p) for p in preds])
    keyed_gts = [(0, g) for g in gts]
    flags = _greedy_match_flags(keyed_preds, keyed_gts, iou_threshold)
    return _interpolated_ap(flags, len(gts))


def map50_95(preds_per_frame, gts_per_frame, class_names) -> DetectionEval:
    """COCO-style mAP: AP per class per threshold in {0.50..0.95 step 0.05},
    predictions pooled over frames with per-frame greedy matching; mAP is the
    mean over thresholds then over classes present in the ground truth.
    Precision/recall are reported at IoU 0.5 with confidence cutoff 0.25."""
    if len(preds_per_frame) != len(gts_per_frame):
        raise ValueError("preds and gts must align frame-for-frame")
    preds_by_class = defaultdict(list)
    gts_by_class = defaultdict(list)
    for fk, (preds, gts) in enumerate(zip(preds_per_frame, gts_per_frame)):
        for p in preds:
            preds_by_class[p.class_id].append((fk, p))
        for g in gts:
            gts_by_class[g.class_id].append((fk, g))

    result = DetectionEval()
    class_means = []
    for cid in sorted(gts_by_class):
        name = class_names[cid] if 0 <= cid < len(class_names) else str(cid)
        keyed_preds = _sorted_by_confidence(preds_by_class.get(cid, []))
        keyed_gts = gts_by_class[cid]
        per_thr = {}
        for thr in MAP_THRESHOLDS:
            flags = _greedy_match_flags(keyed_preds, keyed_gts, thr)
            per_thr[thr] = _interpolated_ap(flags, len(keyed_gts))
        result.ap_per_class[name] = per_thr
        class_means.append(sum(per_thr.values()) / len(per_thr))
    result.map50_95 = sum(class_means) / len(class_means) if class_means else None

    # fixed operating point over all classes that appear anywhere
    tp = n_pred = 0
    n_gt = sum(len(v) for v in gts_by_class.values())
    for cid in sorted(set(preds_by_class) | set(gts_by_class)):
        keyed = [(fk, p) for fk, p in preds_by_class.get(cid, []) if p.confidence >= OPERATING_CONF]
        keyed = _sorted_by_confidence(keyed)
        flags = _greedy_match_flags(keyed, gts_by_class.get(cid, []), OPERATING_IOU)
        tp += sum(flags)
        n_pred += len(keyed)
    result.precision = tp / n_pred if n_pred else None
    result.recall = tp / n_gt if n_gt else None
    return result


# ---------------------------------------------------------------------------
# Inpainting fidelity


def inpaint_fidelity(inpainted: RasterImage, clear: RasterImage, hole: RasterMask) -> FidelityScores:
    if inpainted.data.shape != clear.data.shape or hole.data.shape != clear.data.shape[:2]:
        raise ValueError("inpaint_fidelity inputs must share dimensions")
    sel = hole.data == 255
    if not sel.any():
        raise ValueError("hole mask is empty")
    a = inpainted.data[sel].astype(np.float64)
    b = clear.data[sel].astype(np.float64)
    diff = a - b
    l1 = float(np.abs(diff).mean())
    mse = float((diff**2).mean())
    psnr = PSNR_CAP if mse == 0.0 else 10.0 * math.log10(255.0**2 / mse)
    return FidelityScores(l1_masked=l1, psnr_masked=psnr)
