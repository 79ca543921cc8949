"""Image containers, multi-scale pyramids, and gradient filters.

Everything downstream (warping, losses, networks) moves pixels through the
two types defined here: a planar ``ImageGrid`` of float64 values and a fixed
4-level ``Pyramid`` built by 2x2 mean pooling.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from PIL import Image

PYRAMID_LEVELS = 4

# 3x3 Sobel kernels; x responds to horizontal (u) variation, y to vertical.
SOBEL_X = np.array([[-1.0, 0.0, 1.0],
                    [-2.0, 0.0, 2.0],
                    [-1.0, 0.0, 1.0]])
SOBEL_Y = np.array([[-1.0, -2.0, -1.0],
                    [0.0, 0.0, 0.0],
                    [1.0, 2.0, 1.0]])


@dataclass(frozen=True)
class ImageGrid:
    """H x W x C grid of float64 values, immutable after construction."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(np.asarray(self.data, dtype=np.float64))
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3:
            raise ValueError(f"ImageGrid expects 2-D or 3-D data, got ndim={arr.ndim}")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @classmethod
    def full(cls, height: int, width: int, channels: int, value: float) -> "ImageGrid":
        return cls(np.full((height, width, channels), float(value)))


@dataclass(frozen=True)
class Pyramid:
    """Exactly 4 levels; level k has shape ceil(H/2^k) x ceil(W/2^k)."""

    levels: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if len(self.levels) != PYRAMID_LEVELS:
            raise ValueError(f"Pyramid needs {PYRAMID_LEVELS} levels, got {len(self.levels)}")
        object.__setattr__(self, "levels", tuple(self.levels))

    @staticmethod
    def scale_factor(k: int) -> int:
        return 2 ** k


def _pad_to_even(arr: np.ndarray) -> np.ndarray:
    """Edge-replicate the ragged border so both spatial dims are even."""
    ph = arr.shape[0] % 2
    pw = arr.shape[1] % 2
    if ph == 0 and pw == 0:
        return arr
    return np.pad(arr, ((0, ph), (0, pw), (0, 0)), mode="edge")


def mean_pool2(arr: np.ndarray) -> np.ndarray:
    """2x2 mean-pool of an (H, W, C) array, odd dims rounded up."""
    arr = _pad_to_even(arr)
    return 0.25 * (arr[0::2, 0::2] + arr[0::2, 1::2] + arr[1::2, 0::2] + arr[1::2, 1::2])


def build_pyramid(image: ImageGrid) -> Pyramid:
    """Build the 4-level mean-pool pyramid; level 0 is the input itself."""
    if image.height < 16 or image.width < 16:
        raise ValueError(
            f"build_pyramid needs at least 16x16, got {image.height}x{image.width}")
    levels = [image]
    arr = image.data
    for _ in range(PYRAMID_LEVELS - 1):
        arr = mean_pool2(arr)
        levels.append(ImageGrid(arr))
    return Pyramid(tuple(levels))


def _conv3x3_replicate(arr: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Per-channel 3x3 convolution with edge replication, same output size."""
    padded = np.pad(arr, ((1, 1), (1, 1), (0, 0)), mode="edge")
    out = np.zeros_like(arr)
    for dy in range(3):
        for dx in range(3):
            w = kernel[dy, dx]
            if w != 0.0:
                out += w * padded[dy:dy + arr.shape[0], dx:dx + arr.shape[1]]
    return out


def sobel_gradients(grid: ImageGrid) -> tuple:
    """Per-channel Sobel responses (gx, gy) with edge-replicated borders."""
    if grid.height < 3 or grid.width < 3:
        raise ValueError(
            f"sobel_gradients needs at least 3x3, got {grid.height}x{grid.width}")
    gx = _conv3x3_replicate(grid.data, SOBEL_X)
    gy = _conv3x3_replicate(grid.data, SOBEL_Y)
    return ImageGrid(gx), ImageGrid(gy)


def read_png(path) -> ImageGrid:
    """Read an 8- or 16-bit PNG into [0, 1] values."""
    img = Image.open(path)
    arr = np.asarray(img)
    if arr.dtype == np.uint8:
        return ImageGrid(arr.astype(np.float64) / 255.0)
    if arr.dtype in (np.uint16, np.int32):
        return ImageGrid(arr.astype(np.float64) / 65535.0)
    raise ValueError(f"unsupported PNG sample type {arr.dtype} in {path}")


def write_png(grid: ImageGrid, path, bits: int = 8) -> None:
    """Write [0, 1] values as an 8- or 16-bit PNG."""
    data = np.clip(grid.data, 0.0, 1.0)
    if data.shape[2] == 1:
        data = data[:, :, 0]
    if bits == 8:
        img = Image.fromarray(np.round(data * 255.0).astype(np.uint8))
    elif bits == 16:
        if data.ndim == 3:
            raise ValueError("16-bit PNG output supports single-channel grids only")
        img = Image.fromarray(np.round(data * 65535.0).astype(np.uint16))
    else:
        raise ValueError(f"bits must be 8 or 16, got {bits}")
    img.save(path)


def write_disparity_png(disparity: ImageGrid, path) -> None:
    """Store disparity (pixels) as 16-bit PNG scaled by 256; 0 marks invalid."""
    if disparity.channels != 1:
        raise ValueError("disparity grids are single-channel")
    raw = np.round(disparity.data[:, :, 0] * 256.0)
    if np.any(raw < 0) or np.any(raw > 65535):
        raise ValueError("disparity out of 16-bit range after x256 scaling")
    Image.fromarray(raw.astype(np.uint16)).save(path)


def read_disparity_png(path) -> tuple:
    """Read a x256-scaled 16-bit disparity PNG; returns (grid, valid_mask)."""
    arr = np.asarray(Image.open(path)).astype(np.float64)
    valid = arr > 0
    return ImageGrid(arr / 256.0), valid
