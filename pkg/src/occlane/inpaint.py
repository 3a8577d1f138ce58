"""Inpainting node family.

The coarse stage solves |grad T| = 1 by fast marching (upwind quadratic update
over a min-heap narrow band) and fills hole pixels in nondecreasing-T order
with a direction/distance/level weighted average of already-known neighbors.
The refinement stage replaces hole patches with the most similar fully-known
patch (masked SSD) found within a search window, which restores periodic
structure such as lane stripes that the coarse fill smears."""

from __future__ import annotations

import heapq
import logging
import math
from dataclasses import dataclass

import cv2
import numpy as np

from occlane.core import RasterImage, RasterMask

log = logging.getLogger("occlane.inpaint")

INPAINT_MODES = ("fmm", "fmm+refine", "oracle", "external")


@dataclass(frozen=True)
class InpaintConfig:
    mode: str = "fmm+refine"
    fmm_radius: int = 5
    patch_size: int = 9
    search_window: int = 64
    refine_passes: int = 1

    def __post_init__(self):
        if self.mode not in INPAINT_MODES:
            raise ValueError(f"mode must be one of {INPAINT_MODES}, got {self.mode!r}")
        if self.fmm_radius < 1:
            raise ValueError("fmm_radius must be >= 1")
        if self.patch_size < 3 or self.patch_size % 2 == 0:
            raise ValueError("patch_size must be odd and >= 3")
        if self.search_window < 1:
            raise ValueError("search_window must be >= 1")
        if self.refine_passes < 0:
            raise ValueError("refine_passes must be >= 0")


def _solve_eikonal(a: float, b: float) -> float:
    """Upwind quadratic update from the two axis minima (either may be inf)."""
    if math.isinf(a) and math.isinf(b):
        return math.inf
    if math.isinf(a) or math.isinf(b) or abs(a - b) >= 1.0:
        return min(a, b) + 1.0
    return (a + b + math.sqrt(2.0 - (a - b) ** 2)) / 2.0


def _fmm(hole: np.ndarray):
    """Fast marching over a boolean hole. Returns (T, order): T is 0 on known
    pixels and the arrival time inside the hole; order lists hole pixels in
    acceptance (nondecreasing T) order."""
    h, w = hole.shape
    T = np.where(hole, np.inf, 0.0)
    accepted = ~hole.copy()
    heap: list[tuple[float, int, int]] = []

    def trial(y: int, x: int) -> float:
        a = math.inf
        if x > 0 and accepted[y, x - 1]:
            a = T[y, x - 1]
        if x + 1 < w and accepted[y, x + 1]:
            a = min(a, T[y, x + 1])
        b = math.inf
        if y > 0 and accepted[y - 1, x]:
            b = T[y - 1, x]
        if y + 1 < h and accepted[y + 1, x]:
            b = min(b, T[y + 1, x])
        return _solve_eikonal(a, b)

    ys, xs = np.nonzero(hole)
    for y, x in zip(ys.tolist(), xs.tolist()):
        t = trial(y, x)
        if not math.isinf(t):
            T[y, x] = t
            heapq.heappush(heap, (t, y, x))

    order: list[tuple[int, int]] = []
    while heap:
        t, y, x = heapq.heappop(heap)
        if accepted[y, x] or t > T[y, x]:
            continue
        accepted[y, x] = True
        order.append((y, x))
        for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            ny, nx = y + dy, x + dx
            if 0 <= ny < h and 0 <= nx < w and not accepted[ny, nx]:
                nt = trial(ny, nx)
                if nt < T[ny, nx]:
                    T[ny, nx] = nt
                    heapq.heappush(heap, (nt, ny, nx))
    return T, order


def fmm_distance(hole: RasterMask) -> np.ndarray:
    """Arrival-time field of |grad T| = 1 marching into the hole; zero on the
    known region. Errors when every pixel is hole."""
    if not hole.is_binary():
        raise ValueError("hole mask must be binary")
    hole_bool = hole.data == 255
    if hole_bool.all():
        raise ValueError("hole covers the whole frame; nothing to march from")
    T, _ = _fmm(hole_bool)
    return T


def _masked_gradients(work: np.ndarray, known: np.ndarray):
    """Per-channel d/dy and d/dx over the known set: central difference where
    both neighbors are known, one-sided where only one is, zero otherwise."""
    igy = np.zeros_like(work)
    igx = np.zeros_like(work)
    for g, axis in ((igy, 0), (igx, 1)):
        prev_ok = np.zeros_like(known)
        next_ok = np.zeros_like(known)
        wp = np.zeros_like(work)
        wn = np.zeros_like(work)
        if axis == 0:
            prev_ok[1:], next_ok[:-1] = known[:-1], known[1:]
            wp[1:], wn[:-1] = work[:-1], work[1:]
        else:
            prev_ok[:, 1:], next_ok[:, :-1] = known[:, :-1], known[:, 1:]
            wp[:, 1:], wn[:, :-1] = work[:, :-1], work[:, 1:]
        both = prev_ok & next_ok
        fwd = next_ok & ~prev_ok
        back = prev_ok & ~next_ok
        g[both] = (wn[both] - wp[both]) / 2.0
        g[fwd] = wn[fwd] - work[fwd]
        g[back] = work[back] - wp[back]
        g[~known] = 0.0
    return igy, igx


def _point_gradient(work, known, y, x, dy, dx):
    """One pixel of the same masked-difference stencil, along (dy, dx)."""
    h, w = known.shape
    fy, fx = y + dy, x + dx
    by, bx = y - dy, x - dx
    f_ok = 0 <= fy < h and 0 <= fx < w and known[fy, fx]
    b_ok = 0 <= by < h and 0 <= bx < w and known[by, bx]
    if f_ok and b_ok:
        return (work[fy, fx] - work[by, bx]) / 2.0
    if f_ok:
        return work[fy, fx] - work[y, x]
    if b_ok:
        return work[y, x] - work[by, bx]
    return np.zeros(work.shape[-1])


def inpaint_coarse(image: RasterImage, hole: RasterMask, cfg: InpaintConfig) -> RasterImage:
    """Telea-style fill: hole pixels visited in fast-marching order take the
    normalized direction*distance*level weighted average of first-order
    estimates value(q) + grad(q) . (p - q) from known neighbors q within
    fmm_radius; the gradient term is what keeps linear shading exact instead
    of smeared. One weight set (from the T-field geometry) is applied jointly
    to all three channels to avoid color fringing; results are clipped to the
    known region's per-channel range."""
    if image.data.shape[:2] != hole.data.shape:
        raise ValueError("image and hole dimensions differ")
    if not hole.is_binary():
        raise ValueError("hole mask must be binary")
    hole_bool = hole.data == 255
    if not hole_bool.any():
        return RasterImage(image.data.copy())
    if hole_bool.all():
        raise ValueError("hole covers the whole frame; nothing to march from")

    h, w = hole_bool.shape
    r = cfg.fmm_radius
    T, order = _fmm(hole_bool)
    grad_y, grad_x = np.gradient(T)

    span = 2 * r + 1
    dy_grid, dx_grid = np.mgrid[-r : r + 1, -r : r + 1]
    dist_sq = (dy_grid**2 + dx_grid**2).astype(np.float64)
    in_disk = (dist_sq > 0) & (dist_sq <= r * r)
    dist = np.sqrt(np.where(dist_sq > 0, dist_sq, 1.0))

    work = image.data.astype(np.float64)
    known = ~hole_bool
    igy, igx = _masked_gradients(work, known)
    lo = image.data[known].min(axis=0).astype(np.float64)
    hi = image.data[known].max(axis=0).astype(np.float64)
    for y, x in order:
        y0, y1 = max(0, y - r), min(h, y + r + 1)
        x0, x1 = max(0, x - r), min(w, x + r + 1)
        gy0, gx0 = y0 - (y - r), x0 - (x - r)
        gy1, gx1 = gy0 + (y1 - y0), gx0 + (x1 - x0)
        sel = known[y0:y1, x0:x1] & in_disk[gy0:gy1, gx0:gx1]
        ny, nx = grad_y[y, x], grad_x[y, x]
        d = dist[gy0:gy1, gx0:gx1]
        dyw = dy_grid[gy0:gy1, gx0:gx1]
        dxw = dx_grid[gy0:gy1, gx0:gx1]
        # direction: alignment of the (pixel - neighbor) offset with grad T
        dots = np.abs(dyw * ny + dxw * nx) / d
        direction = np.maximum(dots, 1e-6)
        level = 1.0 / (1.0 + np.abs(T[y0:y1, x0:x1] - T[y, x]))
        weight = (direction / (d * d) * level)[sel]
        # first-order estimate from each neighbor q: I(q) + grad I(q) . (p - q)
        est = (
            work[y0:y1, x0:x1]
            - igy[y0:y1, x0:x1] * dyw[..., None]
            - igx[y0:y1, x0:x1] * dxw[..., None]
        )[sel]
        val = (weight[:, None] * est).sum(axis=0) / weight.sum()
        work[y, x] = np.minimum(np.maximum(val, lo), hi)
        known[y, x] = True
        for yy, xx in ((y, x), (y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
            if 0 <= yy < h and 0 <= xx < w and known[yy, xx]:
                igy[yy, xx] = _point_gradient(work, known, yy, xx, 1, 0)
                igx[yy, xx] = _point_gradient(work, known, yy, xx, 0, 1)

    out = image.data.copy()
    filled = np.clip(np.rint(work[hole_bool]), 0, 255).astype(np.uint8)
    out[hole_bool] = filled
    return RasterImage(out)


def _window_hole_free(hole_bool: np.ndarray, ps: int) -> np.ndarray:
    """Boolean map over patch top-lefts: True where the ps*ps window contains
    no hole pixel (valid source patch positions)."""
    h, w = hole_bool.shape
    ii = np.zeros((h + 1, w + 1), dtype=np.int64)
    ii[1:, 1:] = np.cumsum(np.cumsum(hole_bool.astype(np.int64), axis=0), axis=1)
    sums = ii[ps:, ps:] - ii[:-ps, ps:] - ii[ps:, :-ps] + ii[:-ps, :-ps]
    return sums == 0


def refine_patches(image: RasterImage, hole: RasterMask, cfg: InpaintConfig) -> RasterImage:
    """Patch-similarity refinement over a coarse fill. Query patches tile the
    hole on a stride of patch_size//2; each is replaced (hole pixels only) by
    the masked-SSD-closest source patch lying fully outside the hole within
    +/- search_window. Ties pick the smallest (y, x) source. Queries run in
    onion-peel sweeps: one fires only once part of its window is known or
    already refined, so replacements grow inward from the hole boundary and
    interior patches match against refined context instead of the smear."""
    if image.data.shape[:2] != hole.data.shape:
        raise ValueError("image and hole dimensions differ")
    if not hole.is_binary():
        raise ValueError("hole mask must be binary")
    hole_bool = hole.data == 255
    if not hole_bool.any() or cfg.refine_passes == 0:
        return RasterImage(image.data.copy())

    h, w = hole_bool.shape
    ps, half, win = cfg.patch_size, cfg.patch_size // 2, cfg.search_window
    if h < ps or w < ps:
        log.warning("frame %dx%d smaller than patch %d; refinement skipped", w, h, ps)
        return RasterImage(image.data.copy())

    valid_tl = _window_hole_free(hole_bool, ps)
    if not valid_tl.any():
        log.warning("no hole-free source patch exists; refinement skipped")
        return RasterImage(image.data.copy())

    ys, xs = np.nonzero(hole_bool)
    by0, by1 = int(ys.min()), int(ys.max()) + 1
    bx0, bx1 = int(xs.min()), int(xs.max()) + 1
    stride = max(1, half)

    centers = []
    seen = set()
    for cy in range(by0, by1, stride):
        cy = min(max(cy, half), h - half - 1)
        for cx in range(bx0, bx1, stride):
            cx = min(max(cx, half), w - half - 1)
            if (cy, cx) not in seen:
                seen.add((cy, cx))
                centers.append((cy, cx))

    work = image.data.astype(np.float32)
    written = np.zeros_like(hole_bool)
    for _ in range(cfg.refine_passes):
        context = ~hole_bool | written
        done = [False] * len(centers)
        progress = True
        while progress and not all(done):
            progress = False
            for i, (cy, cx) in enumerate(centers):
                if done[i]:
                    continue
                q_hole = hole_bool[cy - half : cy + half + 1, cx - half : cx + half + 1]
                if not q_hole.any():
                    done[i] = True
                    continue
                q_ctx = context[cy - half : cy + half + 1, cx - half : cx + half + 1]
                if not q_ctx.any():
                    continue  # no anchor yet; wait for neighbors to fill
                # top-left bounds of candidate sources within the window
                ty0, ty1 = max(0, cy - half - win), min(h - ps, cy - half + win)
                tx0, tx1 = max(0, cx - half - win), min(w - ps, cx - half + win)
                if ty0 > ty1 or tx0 > tx1:
                    done[i] = True
                    continue
                valid = valid_tl[ty0 : ty1 + 1, tx0 : tx1 + 1]
                if not valid.any():
                    done[i] = True
                    continue
                region = work[ty0 : ty1 + ps, tx0 : tx1 + ps]
                query = work[cy - half : cy + half + 1, cx - half : cx + half + 1]
                mask = np.repeat(q_ctx[:, :, None], 3, axis=2).astype(np.float32)
                ssd = cv2.matchTemplate(region, query, cv2.TM_SQDIFF, mask=mask)
                ssd[~valid] = np.inf
                flat = int(np.argmin(ssd))
                sy, sx = ty0 + flat // ssd.shape[1], tx0 + flat % ssd.shape[1]
                src = work[sy : sy + ps, sx : sx + ps]
                query[q_hole] = src[q_hole]
                written[cy - half : cy + half + 1, cx - half : cx + half + 1] |= q_hole
                context[cy - half : cy + half + 1, cx - half : cx + half + 1] |= q_hole
                done[i] = True
                progress = True

    unfilled = int((hole_bool & ~written).sum())
    if unfilled:
        log.warning("%d hole pixels had no valid source patch and keep their coarse fill", unfilled)
    out = image.data.copy()
    sel = hole_bool
    out[sel] = np.clip(np.rint(work[sel]), 0, 255).astype(np.uint8)
    return RasterImage(out)


def inpaint_oracle(occluded: RasterImage, hole: RasterMask, clear: RasterImage) -> RasterImage:
    """Hole pixels copied from the clear frame, everything else from occluded."""
    if occluded.data.shape != clear.data.shape or hole.data.shape != occluded.data.shape[:2]:
        raise ValueError("oracle inpaint inputs must share dimensions")
    if not hole.is_binary():
        raise ValueError("hole mask must be binary")
    out = occluded.data.copy()
    sel = hole.data == 255
    out[sel] = clear.data[sel]
    return RasterImage(out)


def inpaint_image(
    image: RasterImage,
    hole: RasterMask,
    cfg: InpaintConfig,
    clear: RasterImage | None = None,
) -> RasterImage:
    """Dispatch on cfg.mode (external mode is orchestrated by the pipeline)."""
    if cfg.mode == "oracle":
        if clear is None:
            raise ValueError("oracle mode needs the clear reference frame")
        return inpaint_oracle(image, hole, clear)
    if cfg.mode == "fmm":
        return inpaint_coarse(image, hole, cfg)
    if cfg.mode == "fmm+refine":
        return refine_patches(inpaint_coarse(image, hole, cfg), hole, cfg)
    raise ValueError(f"mode {cfg.mode!r} is not an in-process inpainter")
