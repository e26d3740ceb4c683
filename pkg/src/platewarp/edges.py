"""Fixed Sobel edge branch: horizontal/vertical gradients and edge strength.

The two 3x3 kernels are frozen (non-trainable) parameters so they show up
in checkpoints and in the model's parameter registry, but the optimizer
never moves them.  The branch is differentiable with respect to its input
image and contributes zero trainable parameters.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor

SOBEL_GX = np.array(
    [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]], dtype=np.float64
)
SOBEL_GY = SOBEL_GX.T.copy()

GAUSSIAN_3X3 = (
    np.array([[1.0, 2.0, 1.0], [2.0, 4.0, 2.0], [1.0, 2.0, 1.0]], dtype=np.float64)
    / 16.0
)

# epsilon inside the magnitude sqrt keeps the gradient bounded on flat regions
MAGNITUDE_EPS = 1e-12

GRAY_WEIGHTS = (0.299, 0.587, 0.114)


def make_sobel_parameters(prefix: str = "sobel") -> tuple[Parameter, Parameter]:
    gx = Parameter(f"{prefix}.gx", SOBEL_GX.reshape(3, 3, 1, 1), trainable=False)
    gy = Parameter(f"{prefix}.gy", SOBEL_GY.reshape(3, 3, 1, 1), trainable=False)
    return gx, gy


def rgb_to_gray(image: Tensor) -> Tensor:
    """Luminance 0.299 R + 0.587 G + 0.114 B of a BHW3 tensor in [0, 1]."""
    if image.data.ndim != 4 or image.data.shape[-1] != 3:
        raise ad.ShapeError(f"rgb_to_gray expects BHW3, got {image.data.shape}")
    wr, wg, wb = GRAY_WEIGHTS
    r = ad.channel_slice(image, 0, 1)
    g = ad.channel_slice(image, 1, 2)
    b = ad.channel_slice(image, 2, 3)
    return ad.add(ad.add(ad.mul(r, wr), ad.mul(g, wg)), ad.mul(b, wb))


def optional_gaussian_presmooth(gray: Tensor, enabled: bool) -> Tensor:
    """3x3 Gaussian smoothing (replicate borders) when enabled, else identity."""
    if not enabled:
        return gray
    kernel = Tensor(GAUSSIAN_3X3.reshape(3, 3, 1, 1))
    return ad.conv2d(ad.replicate_pad2d(gray, 1), kernel, stride=1, padding="valid")


def sobel_features(gray: Tensor, gx_param: Parameter, gy_param: Parameter) -> Tensor:
    """BHW1 grayscale -> BHW3 edge features: gx, gy, sqrt(gx^2 + gy^2).

    Replicate-border padding keeps the output the same size as the input and
    avoids spurious frame edges; constant images map to all zeros.
    """
    if gray.data.ndim != 4 or gray.data.shape[-1] != 1:
        raise ad.ShapeError(f"sobel_features expects BHW1, got {gray.data.shape}")
    if gray.data.shape[1] < 3 or gray.data.shape[2] < 3:
        raise ad.ShapeError("sobel_features needs spatial dims >= 3")
    padded = ad.replicate_pad2d(gray, 1)
    gx = ad.conv2d(padded, gx_param, stride=1, padding="valid")
    gy = ad.conv2d(padded, gy_param, stride=1, padding="valid")
    mag = ad.sqrt(ad.add(ad.add(ad.mul(gx, gx), ad.mul(gy, gy)), MAGNITUDE_EPS))
    return ad.concat_channels(ad.concat_channels(gx, gy), mag)


class EdgeBranch:
    """Owner of the frozen kernels plus the gray -> sobel -> concat pipeline."""

    def __init__(self, presmooth: bool = False, prefix: str = "sobel"):
        self.gx, self.gy = make_sobel_parameters(prefix)
        self.presmooth = presmooth

    def parameters(self) -> list[Parameter]:
        return [self.gx, self.gy]

    def features(self, image: Tensor) -> Tensor:
        gray = rgb_to_gray(image)
        gray = optional_gaussian_presmooth(gray, self.presmooth)
        return sobel_features(gray, self.gx, self.gy)

    def fuse(self, image: Tensor) -> Tensor:
        """RGB channels concatenated with the 3 edge channels (6 total)."""
        return ad.concat_channels(image, self.features(image))
