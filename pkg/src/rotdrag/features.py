"""Dense per-pixel features behind a uniform backend interface.

The reference backend computes analytic features (multi-scale Gaussian
smoothing plus first-order spatial derivatives) directly from the latent, so
the full editing pipeline runs without any pretrained network. The derivative
channels make the features deliberately rotation-sensitive: templates taken
from an unrotated image degrade as content turns, which is exactly the regime
the rotated-template tracker is built for.

A UNet adapter contract is included for swapping in decoder-block features
from a real diffusion model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Protocol

import torch
import torch.nn.functional as F

from rotdrag.diffusion import DenoiserFailure, LatentCode
from rotdrag.geometry import Point2


class OutOfBounds(ValueError):
    """Sample position lies outside the feature map."""


@dataclass
class FeatureMap:
    """Dense feature tensor (C, H, W) with its resolution ratio to the image."""

    data: torch.Tensor
    scale: float = 1.0

    def __post_init__(self) -> None:
        if self.data.ndim != 3:
            raise ValueError(f"feature map must be (C, H, W), got {tuple(self.data.shape)}")
        if self.scale <= 0:
            raise ValueError("scale must be positive")

    @property
    def spatial(self) -> tuple[int, int]:
        return int(self.data.shape[1]), int(self.data.shape[2])


class FeatureBackend(Protocol):
    def extract(
        self, latent: LatentCode, t: int, denoiser, prompt: str
    ) -> FeatureMap:
        ...


def gaussian_kernel1d(sigma: float, dtype=torch.float64) -> torch.Tensor:
    """Normalized 1D Gaussian kernel with radius ceil(3 sigma)."""
    radius = int(math.ceil(3.0 * sigma))
    xs = torch.arange(-radius, radius + 1, dtype=dtype)
    k = torch.exp(-(xs**2) / (2.0 * sigma**2))
    return k / k.sum()


def gaussian_smooth(data: torch.Tensor, sigma: float) -> torch.Tensor:
    """Separable Gaussian smoothing of a (C, H, W) tensor, replicate padding."""
    k = gaussian_kernel1d(sigma, dtype=data.dtype)
    r = (len(k) - 1) // 2
    c = data.shape[0]
    x = data.unsqueeze(0)
    x = F.pad(x, (r, r, 0, 0), mode="replicate")
    x = F.conv2d(x, k.view(1, 1, 1, -1).expand(c, 1, 1, -1), groups=c)
    x = F.pad(x, (0, 0, r, r), mode="replicate")
    x = F.conv2d(x, k.view(1, 1, -1, 1).expand(c, 1, -1, 1), groups=c)
    return x.squeeze(0)


def spatial_gradients(data: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Central-difference x/y derivatives of a (C, H, W) tensor."""
    c = data.shape[0]
    kx = torch.tensor([[-0.5, 0.0, 0.5]], dtype=data.dtype).view(1, 1, 1, 3)
    x = data.unsqueeze(0)
    gx = F.conv2d(F.pad(x, (1, 1, 0, 0), mode="replicate"), kx.expand(c, 1, 1, 3), groups=c)
    gy = F.conv2d(
        F.pad(x, (0, 0, 1, 1), mode="replicate"), kx.view(1, 1, 3, 1).expand(c, 1, 3, 1), groups=c
    )
    return gx.squeeze(0), gy.squeeze(0)


class ReferenceFeatureBackend:
    """Analytic feature extractor: smoothed intensities plus derivatives.

    Channels, for a (C, H, W) latent: C channels smoothed at each sigma in
    smoothing_sigmas, then x- and y-derivatives of the gradient_sigma-smoothed
    channels. Deterministic and differentiable with respect to the latent.
    """

    def __init__(
        self,
        smoothing_sigmas: tuple[float, ...] = (1.0, 2.0, 4.0),
        gradient_sigma: float = 2.0,
    ) -> None:
        self.smoothing_sigmas = smoothing_sigmas
        self.gradient_sigma = gradient_sigma

    def extract(
        self, latent: LatentCode, t: int = 0, denoiser=None, prompt: str = ""
    ) -> FeatureMap:
        data = latent.data
        channels = [gaussian_smooth(data, s) for s in self.smoothing_sigmas]
        base = gaussian_smooth(data, self.gradient_sigma)
        gx, gy = spatial_gradients(base)
        channels.extend([gx, gy])
        return FeatureMap(torch.cat(channels, dim=0), scale=1.0)

    def describe(self) -> dict:
        return {
            "kind": "reference",
            "smoothing_sigmas": list(self.smoothing_sigmas),
            "gradient_sigma": self.gradient_sigma,
        }


class UNetFeatureAdapter:
    """Adapter contract for decoder-block features of a diffusion UNet.

    The wrapped denoiser must expose predict_noise_with_features(latent, t,
    prompt, block_index) returning (noise, features); the features come from
    the requested upsampling block during that single evaluation and are
    bilinearly upsampled to the latent resolution here. Features are used raw,
    without channel normalization, and whatever weights the denoiser carries
    (fine-tuned or not) pass through unchanged.
    """

    def __init__(self, block_index: int = 3) -> None:
        self.block_index = block_index

    def extract(self, latent: LatentCode, t: int, denoiser, prompt: str) -> FeatureMap:
        hook = getattr(denoiser, "predict_noise_with_features", None)
        if hook is None:
            raise DenoiserFailure(
                "denoiser does not expose predict_noise_with_features; "
                "the UNet feature adapter needs a model-backed denoiser"
            )
        _, feats = hook(latent, t, prompt, self.block_index)
        if feats.ndim != 3:
            raise ValueError("adapter expects (C, H, W) block features")
        h, w = latent.spatial
        fm = FeatureMap(feats, scale=feats.shape[2] / w)
        return upsample_features(fm, h, w)

    def describe(self) -> dict:
        return {"kind": "unet-adapter", "block_index": self.block_index, "lora_passthrough": True}


def sample_feature(fm: FeatureMap, p: Point2) -> torch.Tensor:
    """Bilinear subpixel sample of all channels at an image-space position.

    The position is converted to the feature grid via fm.scale. Differentiable
    with respect to fm.data.

    Raises:
        OutOfBounds: if the scaled position leaves the feature grid.
    """
    h, w = fm.spatial
    x = p.x * fm.scale
    y = p.y * fm.scale
    if not (0.0 <= x <= w - 1 and 0.0 <= y <= h - 1):
        raise OutOfBounds(f"({p.x}, {p.y}) scaled to ({x}, {y}) outside {w}x{h} map")
    x0, y0 = int(math.floor(x)), int(math.floor(y))
    x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
    fx, fy = x - x0, y - y0
    d = fm.data
    top = d[:, y0, x0] * (1.0 - fx) + d[:, y0, x1] * fx
    bot = d[:, y1, x0] * (1.0 - fx) + d[:, y1, x1] * fx
    return top * (1.0 - fy) + bot * fy


def clamp_to_bounds(fm: FeatureMap, p: Point2) -> Point2:
    """Clamp an image-space position into the sampleable rectangle."""
    h, w = fm.spatial
    hi_x = (w - 1) / fm.scale
    hi_y = (h - 1) / fm.scale
    return Point2(min(max(p.x, 0.0), hi_x), min(max(p.y, 0.0), hi_y))


def upsample_features(fm: FeatureMap, target_h: int, target_w: int) -> FeatureMap:
    """Bilinear resize to a target spatial size, rescaling fm.scale to match."""
    if target_h < 1 or target_w < 1:
        raise ValueError("target dims must be positive")
    h, w = fm.spatial
    if (h, w) == (target_h, target_w):
        return FeatureMap(fm.data.clone(), fm.scale)
    out = F.interpolate(
        fm.data.unsqueeze(0),
        size=(target_h, target_w),
        mode="bilinear",
        align_corners=True,
    ).squeeze(0)
    return FeatureMap(out, fm.scale * target_w / w)
