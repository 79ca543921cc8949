"""The training objective: robust penalty, similarity terms, and their total.

Every loss here is built from autodiff primitives so the whole objective is
differentiable end to end; concrete-image wrappers exist for the pieces that
are also useful as plain functions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import geometry, warp
from .grid import SOBEL_X, SOBEL_Y, ImageGrid, sobel_gradients

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
SCALE_FACTORS = (1, 2, 4, 8)


@dataclass(frozen=True)
class CharbonnierParams:
    """Exponent and stabilizer of the robust penalty (x^2 + eps^2)^a."""

    a: float = 0.45
    eps: float = 0.001

    def __post_init__(self):
        if not 0.0 < self.a <= 1.0:
            raise ValueError(f"charbonnier exponent a must be in (0, 1], got {self.a}")
        if self.eps <= 0.0:
            raise ValueError(f"charbonnier eps must be positive, got {self.eps}")

    @property
    def at_zero(self) -> float:
        return (self.eps * self.eps) ** self.a


@dataclass(frozen=True)
class LossWeights:
    lambda_ap: float = 1.0
    lambda_ds_base: float = 0.1   # applied as lambda_ds_base / s per scale
    alpha: float = 0.85
    lambda_d: float = 1.0
    lambda_p: float = 1.0

    def __post_init__(self):
        for name in ("lambda_ap", "lambda_ds_base", "lambda_d", "lambda_p"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be non-negative")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")


@dataclass
class LossBreakdown:
    """Per-scale, per-side loss terms plus the recombined total."""

    entries: list = field(default_factory=list)
    total: float = 0.0

    def add(self, scale: int, side: str, ap_spatial: float, ap_temporal: float,
            smooth: float) -> None:
        self.entries.append({"scale": scale, "side": side,
                             "ap_spatial": ap_spatial,
                             "ap_temporal": ap_temporal,
                             "smooth": smooth})

    def recombined_total(self, weights: LossWeights) -> float:
        total = 0.0
        for e in self.entries:
            total += weights.lambda_ap * (weights.lambda_d * e["ap_spatial"]
                                          + weights.lambda_p * e["ap_temporal"])
            total += (weights.lambda_ds_base / e["scale"]) * e["smooth"]
        return total

    def to_json_rows(self) -> list:
        return [{**e, "total": self.total} for e in self.entries]


def charbonnier(x, params: CharbonnierParams = CharbonnierParams()):
    """(x^2 + eps^2)^a elementwise; works on floats, arrays, and Vars."""
    return (x * x + params.eps * params.eps) ** params.a


_WINDOW_KERNELS: dict = {}


def _window_mean3(x: ad.Var) -> ad.Var:
    """3x3 uniform window mean per channel, edge-replicated borders."""
    c = x.value.shape[2]
    kernel = _WINDOW_KERNELS.get(c)
    if kernel is None:
        kernel = np.zeros((3, 3, c, c))
        for i in range(c):
            kernel[:, :, i, i] = 1.0 / 9.0
        _WINDOW_KERNELS[c] = kernel
    return ad.conv2d(ad.pad_edge(x, ((1, 1), (1, 1))), x.tape.const(kernel))


def ssim_map(a: ad.Var, b: ad.Var) -> ad.Var:
    """Local structural similarity per pixel and channel, in [-1, 1]."""
    if a.value.shape != b.value.shape:
        raise ValueError(f"ssim_map shape mismatch: {a.value.shape} vs {b.value.shape}")
    mu_a = _window_mean3(a)
    mu_b = _window_mean3(b)
    var_a = _window_mean3(a * a) - mu_a * mu_a
    var_b = _window_mean3(b * b) - mu_b * mu_b
    cov = _window_mean3(a * b) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return num / den


def ssim_map_grid(a: ImageGrid, b: ImageGrid) -> ImageGrid:
    tape = ad.Tape()
    return ImageGrid(ssim_map(tape.const(a.data), tape.const(b.data)).value)


def erode_mask3(mask: np.ndarray) -> np.ndarray:
    """3x3 erosion treating out-of-image neighbors as valid (edge policy)."""
    padded = np.pad(mask, 1, mode="edge")
    out = np.ones_like(mask)
    for dy in range(3):
        for dx in range(3):
            out &= padded[dy:dy + mask.shape[0], dx:dx + mask.shape[1]]
    return out


def appearance_loss(original: np.ndarray, reconstructed: ad.Var, mask: np.ndarray,
                    weights: LossWeights, charb: CharbonnierParams) -> ad.Var:
    """Charbonnier-penalized mix of structural and absolute differences.

    Averaged over valid pixels with channels folded in; the validity mask is
    eroded by the SSIM window radius so no window straddles invalid samples.
    """
    original = np.asarray(original, dtype=np.float64)
    if original.shape != reconstructed.value.shape:
        raise ValueError(
            f"appearance shape mismatch: {original.shape} vs {reconstructed.value.shape}")
    eroded = erode_mask3(mask)
    n = int(eroded.sum())
    if n == 0:
        raise ValueError("appearance_loss: no valid pixels")
    tape = reconstructed.tape
    orig = tape.const(original)
    structural = charbonnier(1.0 - ssim_map(orig, reconstructed), charb)
    photometric = charbonnier(orig - reconstructed, charb)
    per_pixel = (weights.alpha / 2.0) * structural + (1.0 - weights.alpha) * photometric
    channels = original.shape[2]
    return ad.sum_all(per_pixel * eroded[:, :, None].astype(np.float64)) / (n * channels)


_SOBEL_KERNELS = {
    "x": SOBEL_X[:, :, None, None],
    "y": SOBEL_Y[:, :, None, None],
}


def _sobel_plane(x: ad.Var, axis: str) -> ad.Var:
    """Sobel response of an (H, W) Var, edge-replicated, same size."""
    h, w = x.value.shape
    x3 = ad.reshape(x, (h, w, 1))
    out = ad.conv2d(ad.pad_edge(x3, ((1, 1), (1, 1))),
                    x.tape.const(_SOBEL_KERNELS[axis]))
    return ad.reshape(out, (h, w))


def smoothness_loss(disparity, image: np.ndarray,
                    charb: CharbonnierParams) -> ad.Var:
    """Edge-aware disparity smoothness.

    Disparity gradients (Sobel) are damped by exp(-|image gradient|), with
    the image gradient magnitude averaged over color channels, then pushed
    through the Charbonnier penalty and averaged over all pixels.
    """
    disparity = warp._as_plane(disparity)
    h, w = disparity.value.shape
    image = np.asarray(image, dtype=np.float64)
    if image.shape[:2] != (h, w):
        raise ValueError(f"smoothness shape mismatch: {image.shape[:2]} vs {(h, w)}")
    if h < 3 or w < 3:
        raise ValueError(f"smoothness_loss needs at least 3x3, got {h}x{w}")
    gx, gy = sobel_gradients(ImageGrid(image))
    damp_x = np.exp(-np.abs(gx.data).mean(axis=2))
    damp_y = np.exp(-np.abs(gy.data).mean(axis=2))
    dx = _sobel_plane(disparity, "x")
    dy = _sobel_plane(disparity, "y")
    per_pixel = charbonnier(dx * damp_x, charb) + charbonnier(dy * damp_y, charb)
    return ad.sum_all(per_pixel) / (h * w)


def shift_pose_to_right_camera(pose: geometry.PoseVars, baseline: float) -> geometry.PoseVars:
    """Conjugate a left-camera relative pose by the stereo baseline offset."""
    r = pose.rotation
    t = pose.translation
    b = baseline
    return geometry.PoseVars(r, (r[0][0] * b + t[0] - b,
                                 r[1][0] * b + t[1],
                                 r[2][0] * b + t[2]))


@dataclass
class SnippetBatch:
    """Pyramids of one stereo snippet, ready for the objective.

    ``left_pyrs[f][k]`` is frame f of the left camera at pyramid level k,
    stored as a plain (H, W, C) array.
    """

    left_pyrs: list
    right_pyrs: list
    target_index: int
    rig: geometry.CameraRig

    @property
    def n_frames(self) -> int:
        return len(self.left_pyrs)


def total_objective(batch: SnippetBatch, disp_lr: list, disp_rl: list,
                    poses: list, weights: LossWeights, charb: CharbonnierParams,
                    right_temporal: bool = False) -> tuple:
    """Build the full multi-scale objective on the tape.

    ``disp_lr``/``disp_rl`` hold one disparity Var per pyramid level (in
    pixels at that level); ``poses`` holds one target-to-source PoseVars per
    non-target frame, ordered by frame index. Returns (LossBreakdown,
    scalar total Var). Smoothness is skipped (recorded as 0) at levels
    smaller than the 3x3 Sobel support.
    """
    n = batch.n_frames
    sources = [f for f in range(n) if f != batch.target_index]
    if len(poses) != len(sources):
        raise ValueError(f"expected {len(sources)} poses, got {len(poses)}")
    if len(disp_lr) != len(SCALE_FACTORS) or len(disp_rl) != len(SCALE_FACTORS):
        raise ValueError("need one disparity per pyramid level in each direction")

    tape = None
    for d in disp_lr + disp_rl:
        if isinstance(d, ad.Var):
            tape = d.tape
            break
    if tape is None:
        raise ValueError("at least one disparity must be a tape Var")

    breakdown = LossBreakdown()
    total = None

    def acc(term):
        nonlocal total
        total = term if total is None else total + term

    for k, s in enumerate(SCALE_FACTORS):
        rig_k = batch.rig.at_scale(k)
        target_left = batch.left_pyrs[batch.target_index][k]
        target_right = batch.right_pyrs[batch.target_index][k]
        d_lr = warp._as_plane(disp_lr[k])
        d_rl = warp._as_plane(disp_rl[k])
        h, w = target_left.shape[:2]
        smooth_ok = h >= 3 and w >= 3

        for side in ("left", "right"):
            if side == "left":
                original, opposite, disp = target_left, target_right, d_lr
            else:
                original, opposite, disp = target_right, target_left, d_rl
            recon, valid = warp.reconstruct_stereo(tape.const(opposite), disp, side)
            # degenerate coarse levels can erode the mask away entirely;
            # such terms contribute nothing rather than failing the batch
            if erode_mask3(valid).any():
                ap_spatial = appearance_loss(original, recon, valid, weights, charb)
                acc(weights.lambda_ap * weights.lambda_d * ap_spatial)
            else:
                ap_spatial = None

            ap_temporal = None
            if side == "left" or right_temporal:
                depth = geometry.disparity_to_depth(disp, rig_k)
                pyrs = batch.left_pyrs if side == "left" else batch.right_pyrs
                for pose, f in zip(poses, sources):
                    cam_pose = pose if side == "left" else \
                        shift_pose_to_right_camera(pose, batch.rig.baseline)
                    recon_t, valid_t = warp.reconstruct_temporal(
                        tape.const(pyrs[f][k]), depth, cam_pose, rig_k)
                    if not erode_mask3(valid_t).any():
                        continue
                    term = appearance_loss(original, recon_t, valid_t, weights, charb)
                    ap_temporal = term if ap_temporal is None else ap_temporal + term
                    acc(weights.lambda_ap * weights.lambda_p * term)

            if smooth_ok:
                smooth = smoothness_loss(disp, original, charb)
                acc((weights.lambda_ds_base / s) * smooth)
            else:
                smooth = None

            breakdown.add(
                scale=s, side=side,
                ap_spatial=float(ap_spatial.value) if ap_spatial is not None else 0.0,
                ap_temporal=float(ap_temporal.value) if ap_temporal is not None else 0.0,
                smooth=float(smooth.value) if smooth is not None else 0.0)

    breakdown.total = float(total.value)
    return breakdown, total


def epsilon_floor(weights: LossWeights, charb: CharbonnierParams, n_frames: int,
                  right_temporal: bool = False,
                  smooth_scales: tuple = SCALE_FACTORS) -> float:
    """Analytic value of the total objective when every residual is zero.

    Each appearance term bottoms out at (alpha/2 + 1 - alpha) * rho(0) and
    each smoothness term at 2 * rho(0), where rho(0) = (eps^2)^a.
    """
    rho0 = charb.at_zero
    ap0 = (weights.alpha / 2.0 + 1.0 - weights.alpha) * rho0
    n_sources = n_frames - 1
    per_scale_ap = (weights.lambda_d + weights.lambda_p * n_sources) * ap0
    per_scale_ap += (weights.lambda_d
                     + weights.lambda_p * (n_sources if right_temporal else 0)) * ap0
    total = weights.lambda_ap * len(SCALE_FACTORS) * per_scale_ap
    for s in smooth_scales:
        total += (weights.lambda_ds_base / s) * 2.0 * (2.0 * rho0)
    return total
