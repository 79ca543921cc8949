"""Unsupervised stereo depth and ego-motion estimation, desk scale.

A small library built around four pieces: a reverse-mode autodiff tape over
numpy arrays, differentiable image warping (spatial via disparity, temporal
via depth + pose), a Charbonnier-penalized photometric objective, and a
compact disparity/pose network pair with an Adam trainer. An evaluation kit
covers the standard depth metrics and trajectory errors.
"""

from .grid import ImageGrid, Pyramid, build_pyramid, sobel_gradients
from .geometry import CameraRig, PoseSE3, disparity_to_depth, euler_to_transform
from .objective import CharbonnierParams, LossBreakdown, LossWeights, charbonnier

__version__ = "0.1.0"

__all__ = [
    "ImageGrid", "Pyramid", "build_pyramid", "sobel_gradients",
    "CameraRig", "PoseSE3", "disparity_to_depth", "euler_to_transform",
    "CharbonnierParams", "LossBreakdown", "LossWeights", "charbonnier",
    "__version__",
]
