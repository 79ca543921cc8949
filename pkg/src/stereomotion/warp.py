"""Differentiable inverse warping.

Two reconstruction paths share one bilinear sampler: the spatial path moves
pixels horizontally by a disparity map, the temporal path pushes them
through depth plus a rigid transform. Both are written against autodiff
Vars; thin ``*_grid`` wrappers run them on concrete images.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import geometry
from .grid import ImageGrid


@dataclass
class SampleField:
    """Per-target-pixel source coordinates plus their validity."""

    us: object            # (H, W) Var or ndarray
    vs: object
    valid: np.ndarray     # (H, W) bool

    @property
    def shape(self):
        u = self.us.value if isinstance(self.us, ad.Var) else self.us
        return u.shape


def _coord_values(c) -> np.ndarray:
    return c.value if isinstance(c, ad.Var) else np.asarray(c, dtype=np.float64)


def bounds_mask(us, vs, height: int, width: int) -> np.ndarray:
    u = _coord_values(us)
    v = _coord_values(vs)
    return (u >= 0.0) & (u <= width - 1.0) & (v >= 0.0) & (v <= height - 1.0)


def _floor_left(c: np.ndarray, limit: int) -> np.ndarray:
    """Lower interpolation corner; exact integers use the left cell so the
    coordinate gradient is the left-branch subgradient."""
    c0 = np.floor(c)
    c0[c == c0] -= 1.0
    return np.clip(c0, 0, limit - 2).astype(np.intp)


def bilinear_sample(source: ad.Var, field: SampleField) -> ad.Var:
    """Sample (H, W, C) ``source`` at the field's coordinates.

    Valid pixels mix the 4 neighbors with weights summing to 1; invalid
    pixels come out exactly 0. Differentiable in both the source values and
    the coordinates.
    """
    h, w, c = source.value.shape
    us, vs = field.us, field.vs
    uval, vval = _coord_values(us), _coord_values(vs)
    if uval.shape != vval.shape:
        raise ValueError(f"coordinate shapes differ: {uval.shape} vs {vval.shape}")
    ht, wt = uval.shape
    if field.valid.shape != (ht, wt):
        raise ValueError("valid mask shape does not match the coordinate field")

    safe_u = np.where(field.valid, uval, 0.0)
    safe_v = np.where(field.valid, vval, 0.0)
    u0 = _floor_left(safe_u, w)
    v0 = _floor_left(safe_v, h)

    tape = source.tape
    mask = field.valid.astype(np.float64)
    wu = ((us if isinstance(us, ad.Var) else tape.const(us)) - u0) * mask
    wv = ((vs if isinstance(vs, ad.Var) else tape.const(vs)) - v0) * mask
    wu3 = ad.reshape(wu, (ht, wt, 1))
    wv3 = ad.reshape(wv, (ht, wt, 1))

    chan = np.arange(c)[None, None, :]

    def corner(dy, dx):
        idx = (((v0 + dy) * w + (u0 + dx))[:, :, None] * c + chan)
        return ad.gather(source, idx)

    c00, c01, c10, c11 = corner(0, 0), corner(0, 1), corner(1, 0), corner(1, 1)
    # lerp form keeps weight sums exactly 1 and integer coordinates bit-exact
    top = c00 + wu3 * (c01 - c00)
    bottom = c10 + wu3 * (c11 - c10)
    out = top + wv3 * (bottom - top)
    return out * mask[:, :, None]


def bilinear_sample_grid(source: ImageGrid, field: SampleField) -> ImageGrid:
    tape = ad.Tape()
    out = bilinear_sample(tape.const(source.data), field)
    return ImageGrid(out.value)


def stereo_field(disparity, direction: str, height: int, width: int) -> SampleField:
    """Sampling coordinates for one stereo reconstruction direction.

    ``left``: rebuild the left view by sampling the right image at u - d.
    ``right``: rebuild the right view by sampling the left image at u + d.
    Rows are unchanged (rectified pair).
    """
    if direction not in ("left", "right"):
        raise ValueError(f"direction must be 'left' or 'right', got {direction!r}")
    ug, vg = geometry._pixel_center_grids(height, width)
    if direction == "left":
        us = ug - disparity if isinstance(disparity, ad.Var) else ug - np.asarray(disparity)
    else:
        us = ug + disparity if isinstance(disparity, ad.Var) else ug + np.asarray(disparity)
    valid = bounds_mask(us, vg, height, width)
    return SampleField(us=us, vs=vg, valid=valid)


def _as_plane(x) -> object:
    """Collapse a single-channel (H, W, 1) Var/array to (H, W)."""
    if isinstance(x, ad.Var):
        if x.value.ndim == 3:
            return ad.reshape(x, x.value.shape[:2])
        return x
    x = np.asarray(x, dtype=np.float64)
    return x[:, :, 0] if x.ndim == 3 else x


def reconstruct_stereo(opposite: ad.Var, disparity, direction: str) -> tuple:
    """Rebuild one eye's view from the opposite image and a disparity map.

    Returns (reconstruction Var, valid mask). ``disparity`` is (H, W) or
    (H, W, 1), in pixels at the working resolution.
    """
    h, w, _ = opposite.value.shape
    disparity = _as_plane(disparity)
    dshape = disparity.value.shape if isinstance(disparity, ad.Var) else disparity.shape
    if dshape != (h, w):
        raise ValueError(f"disparity shape {dshape} does not match image {h}x{w}")
    field = stereo_field(disparity, direction, h, w)
    return bilinear_sample(opposite, field), field.valid


def reconstruct_stereo_grid(opposite: ImageGrid, disparity: ImageGrid,
                            direction: str) -> tuple:
    tape = ad.Tape()
    out, valid = reconstruct_stereo(tape.const(opposite.data), tape.const(disparity.data),
                                    direction)
    return ImageGrid(out.value), valid


def reconstruct_temporal(source: ad.Var, target_depth, pose,
                         rig: geometry.CameraRig) -> tuple:
    """Rebuild the target view by sampling ``source`` through depth + pose.

    ``pose`` maps target-camera coordinates into source-camera coordinates.
    Returns (reconstruction Var, valid mask); the mask combines image bounds
    with the frustum test on transformed depth.
    """
    h, w, _ = source.value.shape
    target_depth = _as_plane(target_depth)
    dshape = (target_depth.value.shape if isinstance(target_depth, ad.Var)
              else target_depth.shape)
    if dshape != (h, w):
        raise ValueError(f"depth shape {dshape} does not match image {h}x{w}")
    us, vs, frustum = geometry.reproject_grid(target_depth, pose, rig)
    valid = bounds_mask(us, vs, h, w) & frustum
    field = SampleField(us=us, vs=vs, valid=valid)
    return bilinear_sample(source, field), valid


def reconstruct_temporal_grid(source: ImageGrid, target_depth: ImageGrid,
                              pose: geometry.PoseSE3, rig: geometry.CameraRig) -> tuple:
    tape = ad.Tape()
    out, valid = reconstruct_temporal(tape.const(source.data),
                                      tape.const(target_depth.data[:, :, 0]),
                                      pose, rig)
    return ImageGrid(out.value), valid
