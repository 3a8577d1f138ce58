"""Independent reference implementations used to check the library: plain-loop
pixel counting, literal-formula box geometry, an explicit 101-point AP scan, a
per-pixel alpha-blend compositor, and a heap Dijkstra distance on the 4-grid.
Kept deliberately naive and separate from the package code paths."""

import heapq
import math

import numpy as np


def brute_confusion(pred, gt):
    """Double-loop TP/FP/FN/TN over two 0/255 arrays."""
    tp = fp = fn = tn = 0
    h, w = pred.shape
    for y in range(h):
        for x in range(w):
            p = pred[y, x] == 255
            g = gt[y, x] == 255
            if p and g:
                tp += 1
            elif p and not g:
                fp += 1
            elif not p and g:
                fn += 1
            else:
                tn += 1
    return tp, fp, fn, tn


def brute_scores(tp, fp, fn):
    iou = tp / (tp + fp + fn) if (tp + fp + fn) > 0 else 1.0
    dice = 2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) > 0 else 1.0
    precision = tp / (tp + fp) if (tp + fp) > 0 else None
    recall = tp / (tp + fn) if (tp + fn) > 0 else None
    return {"iou": iou, "dice": dice, "precision": precision, "recall": recall}


def oracle_box_iou(a, b):
    """(x_min, y_min, x_max, y_max) tuples or BBox-likes; half-open boxes."""
    ax0, ay0, ax1, ay1 = a.x_min, a.y_min, a.x_max, a.y_max
    bx0, by0, bx1, by1 = b.x_min, b.y_min, b.x_max, b.y_max
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    area_a = (ax1 - ax0) * (ay1 - ay0)
    area_b = (bx1 - bx0) * (by1 - by0)
    return inter / (area_a + area_b - inter)


def oracle_ciou(pred, gt):
    iou = oracle_box_iou(pred, gt)
    pcx = (pred.x_min + pred.x_max) / 2
    pcy = (pred.y_min + pred.y_max) / 2
    gcx = (gt.x_min + gt.x_max) / 2
    gcy = (gt.y_min + gt.y_max) / 2
    rho_sq = (pcx - gcx) ** 2 + (pcy - gcy) ** 2
    cw = max(pred.x_max, gt.x_max) - min(pred.x_min, gt.x_min)
    ch = max(pred.y_max, gt.y_max) - min(pred.y_min, gt.y_min)
    c_sq = cw * cw + ch * ch
    gw, gh = gt.x_max - gt.x_min, gt.y_max - gt.y_min
    pw, ph = pred.x_max - pred.x_min, pred.y_max - pred.y_min
    v = (4 / math.pi**2) * (math.atan(gw / gh) - math.atan(pw / ph)) ** 2
    alpha = v / ((1 - iou) + v + 1e-9)
    return iou - rho_sq / c_sq - alpha * v


def oracle_ap_pooled(keyed_preds, keyed_gts, thr):
    """Explicit-loop AP: keyed_preds/gts are [(frame_key, box)]; greedy highest-
    IoU matching per frame in descending-confidence order, 101-point scan."""
    if not keyed_gts:
        return None if not keyed_preds else 0.0
    order = sorted(range(len(keyed_preds)), key=lambda i: -keyed_preds[i][1].confidence)
    gt_index = {}
    for j, (fk, _) in enumerate(keyed_gts):
        gt_index.setdefault(fk, []).append(j)
    matched = [False] * len(keyed_gts)
    points = []
    tp = fp = 0
    for i in order:
        fk, p = keyed_preds[i]
        best, best_j = 0.0, -1
        for j in gt_index.get(fk, ()):
            if matched[j]:
                continue
            v = oracle_box_iou(p, keyed_gts[j][1])
            if v > best:
                best, best_j = v, j
        if best_j >= 0 and best >= thr:
            matched[best_j] = True
            tp += 1
        else:
            fp += 1
        points.append((tp / len(keyed_gts), tp / (tp + fp)))
    total = 0.0
    for k in range(101):
        r = k / 100
        best_p = 0.0
        for rec, prec in points:
            if rec >= r and prec > best_p:
                best_p = prec
        total += best_p
    return total / 101


def oracle_ap(preds, gts, thr):
    return oracle_ap_pooled([(0, p) for p in preds], [(0, g) for g in gts], thr)


def oracle_map(preds_per_frame, gts_per_frame, thresholds):
    """Mean over classes present in GT of mean over thresholds of pooled AP."""
    class_ids = set()
    for gts in gts_per_frame:
        class_ids.update(g.class_id for g in gts)
    per_class = {}
    for cid in sorted(class_ids):
        kp = [
            (fk, p)
            for fk, preds in enumerate(preds_per_frame)
            for p in preds
            if p.class_id == cid
        ]
        kg = [
            (fk, g)
            for fk, gts in enumerate(gts_per_frame)
            for g in gts
            if g.class_id == cid
        ]
        aps = [oracle_ap_pooled(kp, kg, thr) for thr in thresholds]
        per_class[cid] = sum(aps) / len(aps)
    if not per_class:
        return None, {}
    return sum(per_class.values()) / len(per_class), per_class


def oracle_alpha_blend(bg, fg_rgba, x0, y0):
    """Float alpha-over of an RGBA sprite onto an RGB array at (x0, y0), plus
    the changed/footprint bbox scan. Returns (blended array, footprint bbox or
    None) with bbox as (x_min, y_min, x_max, y_max) clipped half-open."""
    out = [[list(px) for px in row] for row in bg.tolist()]
    h, w = len(out), len(out[0])
    sh, sw = fg_rgba.shape[:2]
    xs, ys = [], []
    for sy in range(sh):
        for sx in range(sw):
            y, x = y0 + sy, x0 + sx
            if not (0 <= y < h and 0 <= x < w):
                continue
            a = fg_rgba[sy, sx, 3] / 255.0
            if fg_rgba[sy, sx, 3] > 0:
                xs.append(x)
                ys.append(y)
            for c in range(3):
                val = a * fg_rgba[sy, sx, c] + (1 - a) * bg[y, x, c]
                out[y][x][c] = int(round(val))
    bbox = (min(xs), min(ys), max(xs) + 1, max(ys) + 1) if xs else None
    return out, bbox


def dijkstra_distance(hole):
    """4-neighbor unit-cost distance into the hole from all non-hole pixels.
    Non-hole pixels get 0; unreachable hole pixels get inf."""
    h, w = hole.shape
    INF = float("inf")
    dist = [[INF] * w for _ in range(h)]
    heap = []
    for y in range(h):
        for x in range(w):
            if hole[y, x] == 0:
                dist[y][x] = 0.0
                heapq.heappush(heap, (0.0, y, x))
    while heap:
        d, y, x = heapq.heappop(heap)
        if d > dist[y][x]:
            continue
        for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            ny, nx = y + dy, x + dx
            if 0 <= ny < h and 0 <= nx < w and d + 1 < dist[ny][nx]:
                dist[ny][nx] = d + 1
                heapq.heappush(heap, (d + 1, ny, nx))
    return dist


def random_blob_hole(rng, h, w, max_rects=5):
    """Union of pairwise non-adjacent axis-aligned rectangles.

    Keeping a known gap between rectangles means every hole pixel's nearest
    known pixel sits straight along a row or column, where the grid-graph
    distance and the continuous distance agree to within the discretization
    error.  Overlapping rectangles can wrap around a corner of the known
    region, and there the two metrics drift apart by ~0.6 per diagonal step.
    """
    hole = np.zeros((h, w), dtype=bool)
    taken = []
    want = int(rng.integers(1, max_rects + 1))
    tries = 0
    while len(taken) < want and tries < 60:
        tries += 1
        rw = int(rng.integers(3, min(16, w - 2)))
        rh = int(rng.integers(3, min(16, h - 2)))
        x0 = int(rng.integers(0, w - rw))
        y0 = int(rng.integers(0, h - rh))
        box = (y0 - 1, x0 - 1, y0 + rh + 1, x0 + rw + 1)
        clash = any(
            not (box[2] <= t[0] or t[2] <= box[0] or box[3] <= t[1] or t[3] <= box[1])
            for t in taken
        )
        if clash:
            continue
        hole[y0 : y0 + rh, x0 : x0 + rw] = True
        taken.append(box)
    return hole
