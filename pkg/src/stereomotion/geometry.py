"""Camera models, rigid transforms, and the pinhole reprojection chain.

The same formulas are provided twice where needed: a plain numpy form for
data handling and evaluation, and a tape form (operating on autodiff Vars)
for use inside differentiable reconstruction. The two are cross-checked in
the test suite.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .grid import ImageGrid

FRUSTUM_EPS = 1e-6


@dataclass(frozen=True)
class CameraRig:
    """Intrinsics of one rectified stereo pair plus its metric baseline."""

    f: float
    cx: float
    cy: float
    baseline: float
    width: int
    height: int

    def __post_init__(self):
        if self.f <= 0:
            raise ValueError(f"focal length must be positive, got {self.f}")
        if self.baseline <= 0:
            raise ValueError(f"baseline must be positive, got {self.baseline}")

    @property
    def intrinsics(self) -> np.ndarray:
        return np.array([[self.f, 0.0, self.cx],
                         [0.0, self.f, self.cy],
                         [0.0, 0.0, 1.0]])

    def at_scale(self, k: int) -> "CameraRig":
        """Rig seen by pyramid level k (2x2 mean-pool halvings).

        Pixel centers map as u_coarse = (u_fine + 0.5) / 2 - 0.5 per halving.
        """
        s = 2 ** k
        return CameraRig(
            f=self.f / s,
            cx=(self.cx + 0.5) / s - 0.5,
            cy=(self.cy + 0.5) / s - 0.5,
            baseline=self.baseline,
            width=-(-self.width // s),
            height=-(-self.height // s),
        )

    def to_json(self) -> dict:
        return {"f": self.f, "cx": self.cx, "cy": self.cy,
                "baseline": self.baseline, "width": self.width, "height": self.height}

    @classmethod
    def from_json(cls, obj: dict) -> "CameraRig":
        required = {"f", "cx", "cy", "baseline", "width", "height"}
        missing = required - obj.keys()
        if missing:
            raise ValueError(f"calibration missing fields: {sorted(missing)}")
        return cls(f=float(obj["f"]), cx=float(obj["cx"]), cy=float(obj["cy"]),
                   baseline=float(obj["baseline"]),
                   width=int(obj["width"]), height=int(obj["height"]))

    @classmethod
    def load(cls, path) -> "CameraRig":
        with open(path) as fh:
            try:
                obj = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ValueError(f"unreadable calibration {path}: {exc}") from exc
        return cls.from_json(obj)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2)
            fh.write("\n")


def rig_from_kitti_cam_to_cam(path) -> CameraRig:
    """Extract the rectified rig from a KITTI cam-to-cam calibration file.

    Uses P_rect_02 / P_rect_03: f, cx, cy come from the left color camera's
    rectified projection matrix, the baseline from the horizontal offset
    between the two projections, and the image size from S_rect_02.
    """
    fields = {}
    with open(path) as fh:
        for line in fh:
            if ":" in line:
                key, _, rest = line.partition(":")
                fields[key.strip()] = rest.split()
    for key in ("P_rect_02", "P_rect_03", "S_rect_02"):
        if key not in fields:
            raise ValueError(f"calibration file {path} lacks {key}")
    p2 = np.array([float(v) for v in fields["P_rect_02"]]).reshape(3, 4)
    p3 = np.array([float(v) for v in fields["P_rect_03"]]).reshape(3, 4)
    f = p2[0, 0]
    baseline = (p2[0, 3] - p3[0, 3]) / f
    w, h = (int(round(float(v))) for v in fields["S_rect_02"])
    return CameraRig(f=f, cx=p2[0, 2], cy=p2[1, 2], baseline=baseline,
                     width=w, height=h)


class PoseSE3:
    """Rigid transform stored as rotation matrix plus translation."""

    __slots__ = ("rotation", "translation")

    def __init__(self, rotation: np.ndarray, translation: np.ndarray):
        self.rotation = np.asarray(rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(translation, dtype=np.float64).reshape(3)

    @classmethod
    def identity(cls) -> "PoseSE3":
        return cls(np.eye(3), np.zeros(3))

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "PoseSE3":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    def compose(self, other: "PoseSE3") -> "PoseSE3":
        """self after other: (self o other)(x) = self(other(x))."""
        return PoseSE3(self.rotation @ other.rotation,
                       self.rotation @ other.translation + self.translation)

    def invert(self) -> "PoseSE3":
        rt = self.rotation.T
        return PoseSE3(rt, -rt @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def to_vector6(self) -> np.ndarray:
        """(tx, ty, tz, rho, theta, psi) with R = Rz(psi) Ry(theta) Rx(rho)."""
        r = self.rotation
        theta = math.asin(max(-1.0, min(1.0, -r[2, 0])))
        if abs(r[2, 0]) < 1.0 - 1e-12:
            rho = math.atan2(r[2, 1], r[2, 2])
            psi = math.atan2(r[1, 0], r[0, 0])
        else:
            # gimbal lock: fold psi into rho
            rho = math.atan2(-r[1, 2], r[1, 1])
            psi = 0.0
        return np.array([*self.translation, rho, theta, psi])


def _rotation_zyx(sr, cr, st, ct, sp, cp):
    """Entries of Rz(psi) @ Ry(theta) @ Rx(rho) from the six sines/cosines.

    Works for floats and autodiff Vars alike.
    """
    return (
        (cp * ct, cp * st * sr - sp * cr, cp * st * cr + sp * sr),
        (sp * ct, sp * st * sr + cp * cr, sp * st * cr - cp * sr),
        (-st, ct * sr, ct * cr),
    )


def euler_to_transform(pose6) -> PoseSE3:
    """6-vector (tx, ty, tz, rho, theta, psi) -> rigid transform."""
    pose6 = np.asarray(pose6, dtype=np.float64).reshape(6)
    if not np.all(np.isfinite(pose6)):
        raise ValueError("pose parameters must be finite")
    rho, theta, psi = pose6[3:]
    rows = _rotation_zyx(math.sin(rho), math.cos(rho),
                         math.sin(theta), math.cos(theta),
                         math.sin(psi), math.cos(psi))
    return PoseSE3(np.array(rows), pose6[:3])


class PoseVars:
    """Tape-valued rigid transform: 3x3 rotation entries plus translation."""

    __slots__ = ("rotation", "translation")

    def __init__(self, rotation, translation):
        self.rotation = rotation          # tuple of 3 tuples of scalar Vars
        self.translation = translation    # tuple of 3 scalar Vars


def euler_to_transform_vars(pose6: ad.Var) -> PoseVars:
    """Tape version of euler_to_transform; pose6 is a 6-element Var."""
    parts = [ad.reshape(ad.gather(pose6, np.array([i])), ()) for i in range(6)]
    tx, ty, tz, rho, theta, psi = parts
    rows = _rotation_zyx(ad.sin(rho), ad.cos(rho),
                         ad.sin(theta), ad.cos(theta),
                         ad.sin(psi), ad.cos(psi))
    return PoseVars(rows, (tx, ty, tz))


def pose_vars_from_se3(tape: ad.Tape, pose: PoseSE3) -> PoseVars:
    """Wrap a concrete pose as constants for use on a tape."""
    r = tuple(tuple(tape.const(pose.rotation[i, j]) for j in range(3)) for i in range(3))
    t = tuple(tape.const(pose.translation[i]) for i in range(3))
    return PoseVars(r, t)


def disparity_to_depth(disparity, rig: CameraRig):
    """depth = f * baseline / disparity, per pixel.

    Accepts an ImageGrid (returns ImageGrid) or an autodiff Var (returns Var,
    differentiable in the disparity).
    """
    fb = rig.f * rig.baseline
    if isinstance(disparity, ad.Var):
        return fb / disparity
    if isinstance(disparity, ImageGrid):
        if np.any(disparity.data <= 0.0):
            raise ValueError("disparity must be strictly positive")
        return ImageGrid(fb / disparity.data)
    arr = np.asarray(disparity, dtype=np.float64)
    if np.any(arr <= 0.0):
        raise ValueError("disparity must be strictly positive")
    return fb / arr


def depth_to_disparity(depth, rig: CameraRig):
    """Inverse of disparity_to_depth (the mapping is an involution)."""
    return disparity_to_depth(depth, rig)


def reproject_pixel(u: float, v: float, depth: float, pose: PoseSE3,
                    rig: CameraRig) -> tuple:
    """Map one pixel with known depth through a rigid transform.

    Returns (u', v', in_frustum). Out-of-frustum points (transformed depth
    <= FRUSTUM_EPS) are flagged, not raised; their coordinates are computed
    with the depth clamped so callers can still mask them.
    """
    if depth <= 0:
        raise ValueError("depth must be positive")
    x = np.array([(u - rig.cx) / rig.f * depth,
                  (v - rig.cy) / rig.f * depth,
                  depth])
    xs = pose.rotation @ x + pose.translation
    z = max(xs[2], FRUSTUM_EPS)
    return (rig.f * xs[0] / z + rig.cx,
            rig.f * xs[1] / z + rig.cy,
            xs[2] > FRUSTUM_EPS)


def _pixel_center_grids(height: int, width: int) -> tuple:
    u = np.broadcast_to(np.arange(width, dtype=np.float64)[None, :], (height, width))
    v = np.broadcast_to(np.arange(height, dtype=np.float64)[:, None], (height, width))
    return np.ascontiguousarray(u), np.ascontiguousarray(v)


def reproject_grid(depth, pose, rig: CameraRig) -> tuple:
    """Reproject every pixel of an (H, W) depth map through a transform.

    ``depth`` may be an (H, W) Var or ndarray; ``pose`` a PoseVars or PoseSE3.
    Returns (us, vs, frustum_mask) with us/vs matching the depth type.
    """
    if isinstance(depth, ad.Var):
        h, w = depth.value.shape
    else:
        depth = np.asarray(depth, dtype=np.float64)
        h, w = depth.shape
    ug, vg = _pixel_center_grids(h, w)
    if isinstance(pose, PoseSE3):
        r = tuple(tuple(float(pose.rotation[i, j]) for j in range(3)) for i in range(3))
        t = tuple(float(pose.translation[i]) for i in range(3))
    else:
        r = pose.rotation
        t = pose.translation
    x = depth * ((ug - rig.cx) / rig.f)
    y = depth * ((vg - rig.cy) / rig.f)
    z = depth
    xs = r[0][0] * x + r[0][1] * y + r[0][2] * z + t[0]
    ys = r[1][0] * x + r[1][1] * y + r[1][2] * z + t[1]
    zs = r[2][0] * x + r[2][1] * y + r[2][2] * z + t[2]
    zs_value = zs.value if isinstance(zs, ad.Var) else zs
    frustum = zs_value > FRUSTUM_EPS
    if isinstance(zs, ad.Var):
        zsafe = ad.maximum(zs, FRUSTUM_EPS)
    else:
        zsafe = np.maximum(zs, FRUSTUM_EPS)
    us = rig.f * xs / zsafe + rig.cx
    vs = rig.f * ys / zsafe + rig.cy
    return us, vs, frustum
