"""Depth and trajectory evaluation: the standard metric battery.

Depth metrics follow the usual scale-invariant definitions with
configurable cap and crop; trajectory errors integrate per-snippet relative
poses against ground truth with no alignment (the predictions carry
absolute scale), plus an optional per-snippet scale fit for comparison with
scale-blind methods.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import geometry
from .grid import ImageGrid

DEPTH_CSV_COLUMNS = ("abs_rel", "sq_rel", "rmse", "log_rmse", "d1_all",
                     "delta1", "delta2", "delta3")
MIN_DEPTH = 1e-3


@dataclass(frozen=True)
class CropSpec:
    """Fractional evaluation rectangle: rows [top, bottom) x cols [left, right)."""

    name: str
    top: float = 0.0
    bottom: float = 1.0
    left: float = 0.0
    right: float = 1.0

    def mask(self, height: int, width: int) -> np.ndarray:
        out = np.zeros((height, width), dtype=bool)
        r0 = int(self.top * height)
        r1 = int(self.bottom * height)
        c0 = int(self.left * width)
        c1 = int(self.right * width)
        out[r0:r1, c0:c1] = True
        return out


# community-standard evaluation rectangles (fractions of image size)
CROPS = {
    "none": CropSpec("none"),
    "garg": CropSpec("garg", 0.40810811, 0.99189189, 0.03594771, 0.96405229),
    "eigen": CropSpec("eigen", 0.3324324, 0.91351351, 0.0359477, 0.96405229),
}


@dataclass
class DepthMetricsReport:
    abs_rel: float
    sq_rel: float
    rmse: float
    log_rmse: float
    d1_all: float
    delta1: float
    delta2: float
    delta3: float
    n_pixels: int
    cap: float
    crop: str

    def csv_row(self) -> str:
        return ",".join(f"{getattr(self, c):.6f}" for c in DEPTH_CSV_COLUMNS)

    @staticmethod
    def csv_header() -> str:
        return ",".join(DEPTH_CSV_COLUMNS)


def _plane(x) -> np.ndarray:
    if isinstance(x, ImageGrid):
        x = x.data
    x = np.asarray(x, dtype=np.float64)
    return x[:, :, 0] if x.ndim == 3 else x


def depth_metrics(pred, gt, cap: float, crop: str | CropSpec = "none",
                  pred_disp=None, gt_disp=None) -> DepthMetricsReport:
    """Depth error statistics over valid (gt > 0), cropped pixels.

    Both depths are clamped to [1e-3, cap] before comparison. When the
    disparity maps are supplied, the D1 outlier fraction is computed over
    the same pixel set; otherwise it is reported as nan.
    """
    if cap not in (50, 80):
        raise ValueError(f"cap must be 50 or 80 meters, got {cap}")
    pred = _plane(pred)
    gt = _plane(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    crop_spec = CROPS[crop] if isinstance(crop, str) else crop
    mask = (gt > 0) & crop_spec.mask(*gt.shape)
    n = int(mask.sum())
    if n == 0:
        raise ValueError("no valid pixels after masking and cropping")

    p = np.clip(pred[mask], MIN_DEPTH, cap)
    g = np.clip(gt[mask], MIN_DEPTH, cap)
    abs_rel = float(np.mean(np.abs(p - g) / g))
    sq_rel = float(np.mean((p - g) ** 2 / g))
    rmse = float(np.sqrt(np.mean((p - g) ** 2)))
    log_rmse = float(np.sqrt(np.mean((np.log(p) - np.log(g)) ** 2)))
    ratio = np.maximum(p / g, g / p)
    deltas = [float(np.mean(ratio < 1.25 ** k)) for k in (1, 2, 3)]

    d1 = float("nan")
    if pred_disp is not None and gt_disp is not None:
        d1 = d1_all(pred_disp, gt_disp, mask)

    return DepthMetricsReport(abs_rel=abs_rel, sq_rel=sq_rel, rmse=rmse,
                              log_rmse=log_rmse, d1_all=d1,
                              delta1=deltas[0], delta2=deltas[1], delta3=deltas[2],
                              n_pixels=n, cap=float(cap), crop=crop_spec.name)


def d1_all(pred_disp, gt_disp, mask: np.ndarray | None = None) -> float:
    """Disparity outlier rate: error > 3 px AND > 5% of the true disparity."""
    pred = _plane(pred_disp)
    gt = _plane(gt_disp)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    valid = gt > 0
    if mask is not None:
        valid &= mask
    n = int(valid.sum())
    if n == 0:
        raise ValueError("no valid pixels for D1")
    err = np.abs(pred[valid] - gt[valid])
    outlier = (err > 3.0) & (err > 0.05 * gt[valid])
    return float(outlier.mean())


@dataclass
class AteReport:
    t_ate: float
    r_ate: float
    snippet_count: int
    snippet_len: int

    def csv_row(self, seq: str) -> str:
        return f"{seq},{self.t_ate:.6f},{self.r_ate:.6f}"


def integrate_snippet(relatives: list, target_index: int, n: int) -> list:
    """Absolute cam-to-world poses of one snippet, frame 0 at the identity.

    ``relatives`` holds target-to-source transforms for every non-target
    frame, in frame order.
    """
    sources = [f for f in range(n) if f != target_index]
    if len(relatives) != len(sources):
        raise ValueError(f"need {len(sources)} relatives, got {len(relatives)}")
    rel = dict(zip(sources, relatives))
    if target_index == 0:
        target_abs = geometry.PoseSE3.identity()
    else:
        # frame 0 is a source and anchors the chain: T_target = T_0 * r_0
        target_abs = rel[0]
    absolutes = []
    for f in range(n):
        if f == target_index:
            absolutes.append(target_abs)
        else:
            absolutes.append(target_abs.compose(rel[f].invert()))
    return absolutes


def rotation_angle(r: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix, in radians."""
    c = (np.trace(r) - 1.0) / 2.0
    return math.acos(max(-1.0, min(1.0, c)))


def ate(pred_relatives: list, gt_relatives: list, target_index: int, n: int,
        align_scale: bool = False) -> AteReport:
    """Trajectory errors averaged over snippets.

    Per snippet: integrate both relative-pose sets into trajectories
    anchored at the identity, then take the RMS position error over frames
    and the mean geodesic angle between orientations. No alignment is
    applied unless ``align_scale`` requests the per-snippet scale fit.
    """
    if len(pred_relatives) != len(gt_relatives):
        raise ValueError(
            f"snippet streams differ: {len(pred_relatives)} vs {len(gt_relatives)}")
    if not pred_relatives:
        raise ValueError("no snippets to evaluate")
    t_errs = []
    r_errs = []
    for pred_rel, gt_rel in zip(pred_relatives, gt_relatives):
        pred_abs = integrate_snippet(pred_rel, target_index, n)
        gt_abs = integrate_snippet(gt_rel, target_index, n)
        p = np.array([a.translation for a in pred_abs])
        g = np.array([a.translation for a in gt_abs])
        if align_scale:
            denom = float((p * p).sum())
            scale = float((p * g).sum()) / denom if denom > 0 else 1.0
            p = p * scale
        t_errs.append(np.sqrt(np.mean(np.sum((p - g) ** 2, axis=1))))
        r_errs.append(np.mean([rotation_angle(pa.rotation.T @ ga.rotation)
                               for pa, ga in zip(pred_abs, gt_abs)]))
    return AteReport(t_ate=float(np.mean(t_errs)), r_ate=float(np.mean(r_errs)),
                     snippet_count=len(pred_relatives), snippet_len=n)


def integrate_sequence(pred_relatives: list, target_index: int, n: int) -> list:
    """Chain per-snippet predictions into one trajectory over the sequence.

    Snippet i covers frames [i, i+n); its last relative steps the target
    frame forward by one. Returns one pose per frame covered.
    """
    if not pred_relatives:
        raise ValueError("no snippets to integrate")
    first = integrate_snippet(pred_relatives[0], target_index, n)
    poses = list(first)
    for rel in pred_relatives[1:]:
        step = rel[-1]  # target -> last source, one frame ahead of the target
        prev_target_abs = poses[len(poses) - (n - 1 - target_index)]
        poses.append(prev_target_abs.compose(step.invert()))
    return poses
