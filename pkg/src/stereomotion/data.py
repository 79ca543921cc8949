"""Dataset ingestion, augmentation, and the synthetic scene generator.

The generator renders stacks of textured planes by exact ray casting with
4x supersampling, so the emitted disparity maps and poses are analytically
correct; tests use it as ground truth wherever the real benchmark data
would be out of reach.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field, replace

import numpy as np

from . import geometry
from .grid import ImageGrid, read_disparity_png, read_png


@dataclass
class StereoSnippet:
    """n temporally aligned stereo frames plus optional ground truth."""

    left: list
    right: list
    rig: geometry.CameraRig
    gt_disparity_left: list | None = None
    gt_disparity_right: list | None = None
    gt_poses: list | None = None   # absolute left-camera-to-world, one per frame

    def __post_init__(self):
        n = len(self.left)
        if len(self.right) != n:
            raise ValueError("left/right frame counts differ")
        shape = (self.left[0].height, self.left[0].width)
        for g in list(self.left) + list(self.right):
            if (g.height, g.width) != shape:
                raise ValueError("all frames in a snippet must share dimensions")

    @property
    def n_frames(self) -> int:
        return len(self.left)

    def gt_relative(self, target: int, source: int) -> geometry.PoseSE3:
        """Ground-truth target-camera-to-source-camera transform."""
        if self.gt_poses is None:
            raise ValueError("snippet has no ground-truth poses")
        return self.gt_poses[source].invert().compose(self.gt_poses[target])


@dataclass(frozen=True)
class AugmentPolicy:
    """The photometric augmentation recipe; one shared draw per snippet."""

    flip_prob: float = 0.5
    apply_prob: float = 0.5
    brightness: tuple = (0.5, 2.0)
    gamma: tuple = (0.8, 1.2)
    color: tuple = (0.8, 1.2)


def _mirror(grid: ImageGrid) -> ImageGrid:
    return ImageGrid(grid.data[:, ::-1])


_FLIP_AXIS = np.diag([-1.0, 1.0, 1.0])


def _flip_pose(pose: geometry.PoseSE3) -> geometry.PoseSE3:
    return geometry.PoseSE3(_FLIP_AXIS @ pose.rotation @ _FLIP_AXIS,
                            _FLIP_AXIS @ pose.translation)


def augment(snippet: StereoSnippet, policy: AugmentPolicy,
            rng: np.random.Generator) -> StereoSnippet:
    """Apply the augmentation policy with fresh draws from ``rng``.

    A horizontal flip swaps the roles of the two cameras (a mirrored left
    image is the right image of the mirrored scene); color transforms are
    shared by every frame of both eyes. Outputs are clamped to [0, 1].
    """
    do_flip = rng.random() < policy.flip_prob
    gamma = rng.uniform(*policy.gamma) if rng.random() < policy.apply_prob else None
    brightness = rng.uniform(*policy.brightness) if rng.random() < policy.apply_prob else None
    color = rng.uniform(*policy.color, size=3) if rng.random() < policy.apply_prob else None

    left, right = list(snippet.left), list(snippet.right)
    gt_left, gt_right = snippet.gt_disparity_left, snippet.gt_disparity_right
    poses = snippet.gt_poses
    rig = snippet.rig

    if do_flip:
        left, right = [_mirror(g) for g in right], [_mirror(g) for g in left]
        if gt_left is not None or gt_right is not None:
            gt_left, gt_right = (
                [_mirror(g) for g in gt_right] if gt_right is not None else None,
                [_mirror(g) for g in gt_left] if gt_left is not None else None)
        if poses is not None:
            poses = [_flip_pose(p) for p in poses]
        rig = replace(rig, cx=(rig.width - 1) - rig.cx)

    def recolor(grid: ImageGrid) -> ImageGrid:
        arr = grid.data
        if gamma is not None:
            arr = arr ** gamma
        if brightness is not None:
            arr = arr * brightness
        if color is not None and grid.channels == len(color):
            arr = arr * color[None, None, :]
        if arr is grid.data:
            return grid
        return ImageGrid(np.clip(arr, 0.0, 1.0))

    left = [recolor(g) for g in left]
    right = [recolor(g) for g in right]
    return StereoSnippet(left=left, right=right, rig=rig,
                         gt_disparity_left=gt_left, gt_disparity_right=gt_right,
                         gt_poses=poses)


_FRAME_RE = re.compile(r"^(\d{6})\.png$")


def _frame_files(directory) -> list:
    if not os.path.isdir(directory):
        raise FileNotFoundError(f"missing image directory: {directory}")
    frames = {}
    for name in os.listdir(directory):
        m = _FRAME_RE.match(name)
        if m:
            frames[int(m.group(1))] = os.path.join(directory, name)
    if not frames:
        raise FileNotFoundError(f"no NNNNNN.png frames in {directory}")
    first = min(frames)
    count = len(frames)
    for i in range(first, first + count):
        if i not in frames:
            raise FileNotFoundError(
                f"missing frame {i:06d}.png in {directory} (indices must be contiguous)")
    return [frames[i] for i in range(first, first + count)]


def read_kitti_poses(path) -> list:
    """KITTI odometry format: 12 reals per row, row-major 3x4 cam-to-world."""
    poses = []
    with open(path) as fh:
        for ln, line in enumerate(fh):
            vals = line.split()
            if not vals:
                continue
            if len(vals) != 12:
                raise ValueError(f"{path}:{ln + 1}: expected 12 values, got {len(vals)}")
            m = np.array([float(v) for v in vals]).reshape(3, 4)
            poses.append(geometry.PoseSE3(m[:, :3], m[:, 3]))
    return poses


def write_kitti_poses(path, poses: list) -> None:
    with open(path, "w") as fh:
        for p in poses:
            row = np.hstack([p.rotation, p.translation[:, None]]).ravel()
            fh.write(" ".join(f"{v:.12g}" for v in row) + "\n")


def load_sequence(root, snippet_len: int, calib_path=None):
    """Yield overlapping snippets from a directory of stereo frames.

    Layout: root/left/NNNNNN.png, root/right/NNNNNN.png, root/calib.json,
    optional root/poses.txt (KITTI odometry rows) and root/disp_left,
    root/disp_right with x256 16-bit disparity ground truth.
    """
    if snippet_len not in (2, 3, 5):
        raise ValueError(f"snippet length must be 2, 3, or 5, got {snippet_len}")
    left_files = _frame_files(os.path.join(root, "left"))
    right_files = _frame_files(os.path.join(root, "right"))
    if len(left_files) != len(right_files):
        raise ValueError(
            f"left/right frame counts differ in {root}: "
            f"{len(left_files)} vs {len(right_files)}")
    rig = geometry.CameraRig.load(calib_path or os.path.join(root, "calib.json"))

    poses = None
    poses_path = os.path.join(root, "poses.txt")
    if os.path.exists(poses_path):
        poses = read_kitti_poses(poses_path)
        if len(poses) != len(left_files):
            raise ValueError(
                f"{poses_path}: {len(poses)} poses for {len(left_files)} frames")

    def gt_dir(name):
        d = os.path.join(root, name)
        return _frame_files(d) if os.path.isdir(d) else None

    disp_left_files = gt_dir("disp_left")
    disp_right_files = gt_dir("disp_right")

    n = snippet_len
    for start in range(len(left_files) - n + 1):
        window = range(start, start + n)
        left = [read_png(left_files[i]) for i in window]
        right = [read_png(right_files[i]) for i in window]
        gt_left = gt_right = None
        if disp_left_files is not None:
            gt_left = [read_disparity_png(disp_left_files[i])[0] for i in window]
        if disp_right_files is not None:
            gt_right = [read_disparity_png(disp_right_files[i])[0] for i in window]
        yield StereoSnippet(
            left=left, right=right, rig=rig,
            gt_disparity_left=gt_left, gt_disparity_right=gt_right,
            gt_poses=[poses[i] for i in window] if poses is not None else None)


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass(frozen=True)
class PlaneSpec:
    """One textured plane: world depth z = depth + tilt * world_y."""

    depth: float
    tilt: float = 0.0
    texture_seed: int = 0


@dataclass(frozen=True)
class TextureParams:
    spacing: float = 10.0        # value-noise lattice period, reference pixels
    amplitude: float = 0.38      # chroma contrast around the base level
    cue: bool = True             # encode reference disparity in the base level
    cue_range: tuple = (2.0, 12.0)
    base_range: tuple = (0.2, 0.72)
    flat_base: float = 0.5       # base level when the cue is disabled


@dataclass(frozen=True)
class SynthSpec:
    width: int
    height: int
    rig: geometry.CameraRig
    planes: tuple
    motion: tuple = ()           # per-step 6-vectors, cam-to-world increments
    texture: TextureParams = field(default_factory=TextureParams)
    band_rows: tuple | None = None   # stripe boundaries in reference rows

    def __post_init__(self):
        if not self.planes:
            raise ValueError("synthetic scene needs at least one plane")
        if self.texture.amplitude <= 0:
            raise ValueError("texture amplitude must be positive (zero contrast is degenerate)")
        if (self.rig.width, self.rig.height) != (self.width, self.height):
            raise ValueError("rig dimensions must match the scene dimensions")

    @property
    def n_frames(self) -> int:
        return len(self.motion) + 1

    def to_json(self) -> dict:
        return {
            "width": self.width, "height": self.height,
            "rig": self.rig.to_json(),
            "planes": [{"depth": p.depth, "tilt": p.tilt, "texture_seed": p.texture_seed}
                       for p in self.planes],
            "motion": [list(map(float, m)) for m in self.motion],
            "texture": {"spacing": self.texture.spacing,
                        "amplitude": self.texture.amplitude,
                        "cue": self.texture.cue,
                        "cue_range": list(self.texture.cue_range),
                        "base_range": list(self.texture.base_range),
                        "flat_base": self.texture.flat_base},
            "band_rows": list(self.band_rows) if self.band_rows is not None else None,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SynthSpec":
        known = {"width", "height", "rig", "planes", "motion", "texture", "band_rows"}
        unknown = obj.keys() - known
        if unknown:
            raise ValueError(f"unknown synthetic-scene keys: {sorted(unknown)}")
        tex = TextureParams()
        if "texture" in obj:
            t = dict(obj["texture"])
            t_unknown = t.keys() - {"spacing", "amplitude", "cue", "cue_range",
                                    "base_range", "flat_base"}
            if t_unknown:
                raise ValueError(f"unknown texture keys: {sorted(t_unknown)}")
            if "cue_range" in t:
                t["cue_range"] = tuple(t["cue_range"])
            if "base_range" in t:
                t["base_range"] = tuple(t["base_range"])
            tex = TextureParams(**t)
        return cls(
            width=int(obj["width"]), height=int(obj["height"]),
            rig=geometry.CameraRig.from_json(obj["rig"]),
            planes=tuple(PlaneSpec(depth=float(p["depth"]), tilt=float(p.get("tilt", 0.0)),
                                   texture_seed=int(p.get("texture_seed", 0)))
                         for p in obj["planes"]),
            motion=tuple(tuple(float(v) for v in m) for m in obj.get("motion", [])),
            texture=tex,
            band_rows=(tuple(obj["band_rows"]) if obj.get("band_rows") is not None else None))


def _hash01(ix: np.ndarray, iy: np.ndarray, seed: int) -> np.ndarray:
    """Deterministic lattice randoms in [0, 1) from integer coordinates."""
    seed_mix = np.uint64(((seed & 0xFFFFFFFF) * 0xD6E8FEB86659FD93) & 0xFFFFFFFFFFFFFFFF)
    with np.errstate(over="ignore"):
        h = (ix.astype(np.int64).astype(np.uint64) * np.uint64(0x9E3779B97F4A7C15)
             ^ iy.astype(np.int64).astype(np.uint64) * np.uint64(0xC2B2AE3D27D4EB4F)
             ^ seed_mix)
    h ^= h >> np.uint64(30)
    h *= np.uint64(0xBF58476D1CE4E5B9)
    h ^= h >> np.uint64(27)
    h *= np.uint64(0x94D049BB133111EB)
    h ^= h >> np.uint64(31)
    return h.astype(np.float64) / 2.0 ** 64


def _value_noise(x: np.ndarray, y: np.ndarray, seed: int, spacing: float) -> np.ndarray:
    """Band-limited value noise: smoothstep interpolation of a random lattice."""
    gx = x / spacing
    gy = y / spacing
    x0 = np.floor(gx)
    y0 = np.floor(gy)
    fx = gx - x0
    fy = gy - y0
    sx = fx * fx * (3.0 - 2.0 * fx)
    sy = fy * fy * (3.0 - 2.0 * fy)
    v00 = _hash01(x0, y0, seed)
    v01 = _hash01(x0 + 1, y0, seed)
    v10 = _hash01(x0, y0 + 1, seed)
    v11 = _hash01(x0 + 1, y0 + 1, seed)
    top = v00 + sx * (v01 - v00)
    bottom = v10 + sx * (v11 - v10)
    return top + sy * (bottom - top)


class _SceneRenderer:
    """Ray caster over the plane stack of one SynthSpec."""

    def __init__(self, spec: SynthSpec):
        self.spec = spec
        n_planes = len(spec.planes)
        if spec.band_rows is not None:
            if len(spec.band_rows) != n_planes - 1:
                raise ValueError(
                    f"band_rows needs {n_planes - 1} boundaries for {n_planes} planes")
            bounds = list(spec.band_rows)
        else:
            h = spec.height
            bounds = [h * (j + 1) / n_planes for j in range(n_planes - 1)]
        self.lower = np.array([-np.inf] + bounds)
        self.upper = np.array(bounds + [np.inf])

    def _cast(self, origin: np.ndarray, dirs: np.ndarray) -> tuple:
        """Intersect rays with the plane stack.

        ``dirs`` is (..., 3) in world coordinates, scaled so that the ray
        parameter equals camera depth. Returns (points (..., 3), cam_depth).
        """
        spec = self.spec
        rig = spec.rig
        best_s = np.full(dirs.shape[:-1], np.inf)
        best_plane = np.full(dirs.shape[:-1], -1, dtype=np.intp)
        fallback_s = np.full(dirs.shape[:-1], np.inf)
        fallback_plane = np.full(dirs.shape[:-1], -1, dtype=np.intp)
        for j, plane in enumerate(spec.planes):
            denom = dirs[..., 2] - plane.tilt * dirs[..., 1]
            denom = np.where(np.abs(denom) < 1e-12, 1e-12, denom)
            s = (plane.depth + plane.tilt * origin[1] - origin[2]) / denom
            hit = s > 0.05
            py = origin[1] + s * dirs[..., 1]
            pz = origin[2] + s * dirs[..., 2]
            with np.errstate(divide="ignore", invalid="ignore"):
                v_ref = rig.f * py / pz + rig.cy
            in_band = hit & (pz > 0) & (v_ref >= self.lower[j]) & (v_ref < self.upper[j])
            closer = in_band & (s < best_s)
            best_s = np.where(closer, s, best_s)
            best_plane = np.where(closer, j, best_plane)
            fb_closer = hit & (s < fallback_s)
            fallback_s = np.where(fb_closer, s, fallback_s)
            fallback_plane = np.where(fb_closer, j, fallback_plane)
        none = best_plane < 0
        best_s = np.where(none, fallback_s, best_s)
        best_plane = np.where(none, fallback_plane, best_plane)
        if np.any(best_plane < 0):
            raise ValueError("degenerate scene: some rays hit no plane")
        points = origin + best_s[..., None] * dirs
        return points, best_s, best_plane

    def _shade(self, points: np.ndarray, plane_idx: np.ndarray) -> np.ndarray:
        spec = self.spec
        tex = spec.texture
        rig = spec.rig
        out = np.zeros(points.shape[:-1] + (3,))
        for j, plane in enumerate(spec.planes):
            sel = plane_idx == j
            if not np.any(sel):
                continue
            p = points[sel]
            # painted once per surface point: the base level encodes the
            # reference-view disparity so appearance stays motion-invariant
            if tex.cue:
                d_ref = rig.f * rig.baseline / p[:, 2]
                lo, hi = tex.cue_range
                blo, bhi = tex.base_range
                frac = np.clip((d_ref - lo) / (hi - lo), 0.0, 1.0)
                base = blo + frac * (bhi - blo)
            else:
                base = np.full(p.shape[0], tex.flat_base)
            scale_to_px = rig.f / plane.depth
            tx = p[:, 0] * scale_to_px
            ty = p[:, 1] * scale_to_px
            noise = np.stack([
                _value_noise(tx, ty, plane.texture_seed * 3 + c, tex.spacing)
                for c in range(3)], axis=-1)
            centered = noise - noise.mean(axis=-1, keepdims=True)
            out[sel] = base[:, None] * (1.0 + tex.amplitude * centered)
        return out

    def render(self, cam_pose: geometry.PoseSE3, supersample: bool = True) -> tuple:
        """Render one camera; returns (image (H,W,3), depth (H,W))."""
        spec = self.spec
        rig = spec.rig
        h, w = spec.height, spec.width
        offsets = [(-0.25, -0.25), (-0.25, 0.25), (0.25, -0.25), (0.25, 0.25)] \
            if supersample else [(0.0, 0.0)]
        image = np.zeros((h, w, 3))
        origin = cam_pose.translation
        rot = cam_pose.rotation
        for du, dv in offsets:
            u = np.arange(w)[None, :] + du
            v = np.arange(h)[:, None] + dv
            dir_cam = np.stack([
                np.broadcast_to((u - rig.cx) / rig.f, (h, w)),
                np.broadcast_to((v - rig.cy) / rig.f, (h, w)),
                np.ones((h, w))], axis=-1)
            dirs = dir_cam @ rot.T
            points, _, plane_idx = self._cast(origin, dirs)
            image += self._shade(points, plane_idx)
        image /= len(offsets)

        u = np.broadcast_to(np.arange(w)[None, :].astype(np.float64), (h, w))
        v = np.broadcast_to(np.arange(h)[:, None].astype(np.float64), (h, w))
        dir_cam = np.stack([(u - rig.cx) / rig.f, (v - rig.cy) / rig.f,
                            np.ones((h, w))], axis=-1)
        _, depth, _ = self._cast(origin, dir_cam @ rot.T)
        return image, depth


def synth_generate(spec: SynthSpec) -> StereoSnippet:
    """Render a snippet with exact disparity and pose ground truth."""
    renderer = _SceneRenderer(spec)
    rig = spec.rig
    pose = geometry.PoseSE3.identity()
    poses = [pose]
    for step in spec.motion:
        pose = pose.compose(geometry.euler_to_transform(step))
        poses.append(pose)

    right_offset = geometry.PoseSE3(np.eye(3), np.array([rig.baseline, 0.0, 0.0]))
    left, right, gt_dl, gt_dr = [], [], [], []
    for cam in poses:
        img_l, depth_l = renderer.render(cam)
        img_r, depth_r = renderer.render(cam.compose(right_offset))
        left.append(ImageGrid(img_l))
        right.append(ImageGrid(img_r))
        gt_dl.append(ImageGrid(rig.f * rig.baseline / depth_l))
        gt_dr.append(ImageGrid(rig.f * rig.baseline / depth_r))
    return StereoSnippet(left=left, right=right, rig=rig,
                         gt_disparity_left=gt_dl, gt_disparity_right=gt_dr,
                         gt_poses=poses)


def default_rig(width: int, height: int, f: float = 45.0,
                baseline: float = 0.5) -> geometry.CameraRig:
    return geometry.CameraRig(f=f, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
                              baseline=baseline, width=width, height=height)


def random_scene_spec(rng: np.random.Generator, width: int = 48, height: int = 32,
                      n_frames: int = 3, rig: geometry.CameraRig | None = None,
                      texture: TextureParams | None = None,
                      max_planes: int = 3) -> SynthSpec:
    """Draw one random desk-scale scene: 1..max_planes textured planes with
    modest forward/lateral camera motion."""
    rig = rig or default_rig(width, height)
    texture = texture or TextureParams()
    n_planes = int(rng.integers(1, max_planes + 1))
    lo, hi = texture.cue_range
    disparities = np.sort(rng.uniform(lo + 0.5, hi - 0.5, size=n_planes))
    planes = []
    for j, d in enumerate(disparities):
        depth = rig.f * rig.baseline / d
        tilt = float(rng.uniform(-0.15, 0.15)) if rng.random() < 0.5 else 0.0
        planes.append(PlaneSpec(depth=depth, tilt=tilt,
                                texture_seed=int(rng.integers(0, 2 ** 31))))
    motion = []
    for _ in range(n_frames - 1):
        step = np.array([
            rng.uniform(-0.06, 0.06),
            rng.uniform(-0.03, 0.03),
            rng.uniform(0.05, 0.25),
            rng.uniform(-0.01, 0.01),
            rng.uniform(-0.01, 0.01),
            rng.uniform(-0.005, 0.005)])
        motion.append(tuple(step))
    return SynthSpec(width=width, height=height, rig=rig, planes=tuple(planes),
                     motion=tuple(motion), texture=texture)


def synth_dataset(count: int, seed: int, width: int = 48, height: int = 32,
                  n_frames: int = 3, texture: TextureParams | None = None) -> list:
    """Deterministic list of rendered random snippets."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    return [synth_generate(random_scene_spec(rng, width, height, n_frames,
                                             texture=texture))
            for _ in range(count)]
