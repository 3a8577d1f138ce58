"""Classical lane segmentation node.

threshold -> ROI -> column-histogram peaks -> sliding windows -> quadratic fit
-> rasterize. Candidates are bright-or-edge pixels inside the road ROI; each
histogram peak seeds a stack of windows walked bottom-up, recentering on the
candidate mean; the tracked points are fit with x = a*y^2 + b*y + c and the
fitted curves are rasterized with the same stroke semantics the ground-truth
masks use, so the prediction is exactly the rasterization of the returned
model.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import cv2
import numpy as np

from occlane.core import RasterImage, RasterMask, luma, polygon_mask
from occlane.synthgen import LaneModel, curve_x, render_lane_mask

FIT_MODES = ("lsq", "ransac")


@dataclass(frozen=True)
class LaneFinderConfig:
    luma_threshold: int = 170
    grad_threshold: float = 60.0
    roi: tuple[tuple[float, float], ...] | None = None
    n_windows: int = 12
    window_halfwidth: int = 20
    min_pixels_recenter: int = 30
    fit: str = "lsq"
    ransac_iters: int = 200
    ransac_tol: float = 2.0
    ransac_seed: int = 0
    stroke: int = 5
    min_peak_mass: int = 50

    def __post_init__(self):
        if not (0 <= self.luma_threshold <= 255):
            raise ValueError("luma_threshold must be in 0..255")
        if self.grad_threshold < 0:
            raise ValueError("grad_threshold must be >= 0")
        if self.n_windows < 4:
            raise ValueError("n_windows must be >= 4")
        if self.window_halfwidth < 1:
            raise ValueError("window_halfwidth must be >= 1")
        if self.min_pixels_recenter < 1:
            raise ValueError("min_pixels_recenter must be >= 1")
        if self.fit not in FIT_MODES:
            raise ValueError(f"fit must be one of {FIT_MODES}, got {self.fit!r}")
        if self.ransac_iters < 1:
            raise ValueError("ransac_iters must be >= 1")
        if self.ransac_tol <= 0:
            raise ValueError("ransac_tol must be > 0")
        if self.stroke < 1:
            raise ValueError("stroke must be >= 1")
        if self.min_peak_mass < 1:
            raise ValueError("min_peak_mass must be >= 1")
        if self.roi is not None:
            object.__setattr__(
                self, "roi", tuple((float(x), float(y)) for x, y in self.roi)
            )

    def with_roi(self, vertices) -> "LaneFinderConfig":
        """Copy of this config bound to a frame's road polygon."""
        kwargs = asdict(self)
        kwargs["roi"] = tuple((float(x), float(y)) for x, y in vertices)
        return LaneFinderConfig(**kwargs)


def candidate_mask(image: RasterImage, cfg: LaneFinderConfig) -> np.ndarray:
    """Boolean map of bright-or-edge pixels inside the ROI polygon."""
    if cfg.roi is None:
        raise ValueError("segmentation requires a road ROI polygon")
    h, w = image.data.shape[:2]
    lum = luma(image)
    gx = cv2.Sobel(lum.astype(np.float32), cv2.CV_32F, 1, 0, ksize=3)
    gy = cv2.Sobel(lum.astype(np.float32), cv2.CV_32F, 0, 1, ksize=3)
    mag = np.sqrt(gx * gx + gy * gy)
    roi = polygon_mask(cfg.roi, w, h).data == 255
    return ((lum >= cfg.luma_threshold) | (mag >= cfg.grad_threshold)) & roi


def _roi_y_extent(cfg: LaneFinderConfig, height: int) -> tuple[int, int]:
    vy = [y for _, y in cfg.roi]
    y0 = max(0, int(np.floor(min(vy))))
    y1 = min(height, int(np.ceil(max(vy))))
    if y0 >= y1:
        raise ValueError("ROI polygon has no vertical extent inside the frame")
    return y0, y1


def histogram_peaks(cand: np.ndarray, y0: int, y1: int, cfg: LaneFinderConfig) -> list[int]:
    """Greedy peak picking on the windowed column mass of the bottom third of
    the ROI rows. A peak needs mass >= min_peak_mass within +/- halfwidth and
    peaks stay >= 2*halfwidth apart; ties go to the smaller x."""
    band_y0 = y1 - max(1, (y1 - y0) // 3)
    hist = cand[band_y0:y1].sum(axis=0).astype(np.float64)
    hw = cfg.window_halfwidth
    mass = np.convolve(hist, np.ones(2 * hw + 1), mode="same")
    peaks = []
    while True:
        x = int(np.argmax(mass))
        if mass[x] < cfg.min_peak_mass:
            break
        # a windowed delta is a plateau; argmax lands on its edge, so place
        # the peak at the raw-mass centroid of the window instead
        w0, w1 = max(0, x - hw), min(hist.size, x + hw + 1)
        seg = hist[w0:w1]
        if seg.sum() > 0:
            x = int(np.floor(w0 + (np.arange(w0, w1) - w0) @ seg / seg.sum() + 0.5))
        mass[max(0, x - 2 * hw + 1) : x + 2 * hw] = -np.inf
        if all(abs(x - p) >= 2 * hw for p in peaks):
            peaks.append(x)
    return sorted(peaks)


def _track_windows(cand_ys, cand_xs, peak: int, y0: int, y1: int, cfg: LaneFinderConfig):
    """Walk n_windows bands bottom-up from a histogram peak, recentering on the
    mean candidate x whenever a band holds >= min_pixels_recenter of them.
    The captured pixels are reduced to one centroid per row: row centers track
    the rail at sub-pixel accuracy, where raw stripe pixels would let a tight
    fit tolerance latch onto one edge of the stroke."""
    edges = np.rint(np.linspace(y0, y1, cfg.n_windows + 1)).astype(int)
    hw = cfg.window_halfwidth
    center = float(peak)
    keep = np.zeros(cand_ys.shape[0], dtype=bool)
    for k in range(cfg.n_windows - 1, -1, -1):
        wy0, wy1 = edges[k], edges[k + 1]
        sel = (cand_ys >= wy0) & (cand_ys < wy1) & (np.abs(cand_xs - center) <= hw)
        keep |= sel
        if sel.sum() >= cfg.min_pixels_recenter:
            center = float(cand_xs[sel].mean())
    if not keep.any():
        return np.empty(0), np.empty(0)
    rows, inverse = np.unique(cand_ys[keep], return_inverse=True)
    sums = np.bincount(inverse, weights=cand_xs[keep].astype(np.float64))
    counts = np.bincount(inverse)
    return sums / counts, rows.astype(np.float64)


def ransac_polyfit(points, degree: int = 2, iters: int = 200, tol: float = 2.0, seed: int = 0):
    """Largest-consensus polynomial x = poly(y): `iters` minimal samples, each
    fit scored by |x_i - poly(y_i)| <= tol inlier count, then a least-squares
    refit on the best consensus set. Samples with repeated y are redrawn."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError("points must be (x, y) pairs")
    n = pts.shape[0]
    if n < degree + 1:
        raise ValueError(f"need at least {degree + 1} points for degree {degree}")
    xs, ys = pts[:, 0], pts[:, 1]
    if np.unique(ys).size < degree + 1:
        raise ValueError("points must span at least degree+1 distinct y values")
    rng = np.random.default_rng(seed)
    best_count, best_inliers = 0, None
    for _ in range(iters):
        for _ in range(32):
            idx = rng.choice(n, size=degree + 1, replace=False)
            if np.unique(ys[idx]).size == degree + 1:
                break
        else:
            continue
        coeffs = np.polyfit(ys[idx], xs[idx], degree)
        inliers = np.abs(xs - np.polyval(coeffs, ys)) <= tol
        count = int(inliers.sum())
        if count > best_count:
            best_count, best_inliers = count, inliers
    if best_inliers is None or best_count < degree + 1:
        best_inliers = np.ones(n, dtype=bool)
    final = np.polyfit(ys[best_inliers], xs[best_inliers], degree)
    return tuple(float(v) for v in final)


def segment_lanes(image: RasterImage, cfg: LaneFinderConfig) -> tuple[RasterMask, LaneModel]:
    """Find lane curves in one frame. No peaks is a blank prediction, not an
    error: empty mask and zero-curve model. The mask is always exactly
    render_lane_mask(model) at cfg.stroke."""
    h, w = image.data.shape[:2]
    cand = candidate_mask(image, cfg)
    y0, y1 = _roi_y_extent(cfg, h)
    peaks = histogram_peaks(cand, y0, y1, cfg)

    cand_ys, cand_xs = np.nonzero(cand)
    curves = []
    for peak in peaks:
        px, py = _track_windows(cand_ys, cand_xs, peak, y0, y1, cfg)
        if px.size < 3:
            continue
        yc = py + 0.5  # fit against row centers, matching the rasterizer
        if cfg.fit == "ransac":
            coeffs = ransac_polyfit(
                np.column_stack([px, yc]),
                degree=2,
                iters=cfg.ransac_iters,
                tol=cfg.ransac_tol,
                seed=cfg.ransac_seed,
            )
        else:
            coeffs = tuple(float(v) for v in np.polyfit(yc, px, 2))
        curves.append(coeffs)

    curves.sort(key=lambda cf: curve_x(cf, y1 - 0.5))
    model = LaneModel(curves=tuple(curves), y_top=y0, y_bottom=y1)
    mask = render_lane_mask(model, (h, w), cfg.stroke)
    return mask, model


def lane_config_to_dict(cfg: LaneFinderConfig) -> dict:
    out = asdict(cfg)
    out["roi"] = None if cfg.roi is None else [list(v) for v in cfg.roi]
    return out


def lane_config_from_dict(obj: dict) -> LaneFinderConfig:
    kwargs = dict(obj)
    if kwargs.get("roi") is not None:
        kwargs["roi"] = tuple(tuple(v) for v in kwargs["roi"])
    return LaneFinderConfig(**kwargs)
