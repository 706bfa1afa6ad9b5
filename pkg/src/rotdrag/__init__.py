"""Rotation-aware point-based image editing on diffusion latents."""

from rotdrag.diffusion import (
    DEFAULT_SCHEDULE,
    Denoiser,
    LatentCode,
    LinearDenoiser,
    NoiseSchedule,
    ZeroDenoiser,
    ddim_denoise,
    ddim_invert,
    ddim_step,
    forward_diffuse,
)
from rotdrag.engine import (
    DragConfig,
    DragResult,
    DragSession,
    StepReport,
    StopReason,
    init_session,
)
from rotdrag.features import (
    FeatureMap,
    ReferenceFeatureBackend,
    UNetFeatureAdapter,
    sample_feature,
    upsample_features,
)
from rotdrag.geometry import (
    AffineCategory,
    Homography,
    Point2,
    compute_rotation_angle,
    corner_error,
    normalize_angle,
    rotate_image,
    rotate_point,
    select_rotation_axis,
)

__all__ = [
    "AffineCategory",
    "DEFAULT_SCHEDULE",
    "Denoiser",
    "DragConfig",
    "DragResult",
    "DragSession",
    "FeatureMap",
    "Homography",
    "LatentCode",
    "LinearDenoiser",
    "NoiseSchedule",
    "Point2",
    "ReferenceFeatureBackend",
    "StepReport",
    "StopReason",
    "UNetFeatureAdapter",
    "ZeroDenoiser",
    "compute_rotation_angle",
    "corner_error",
    "ddim_denoise",
    "ddim_invert",
    "ddim_step",
    "forward_diffuse",
    "init_session",
    "normalize_angle",
    "rotate_image",
    "rotate_point",
    "sample_feature",
    "select_rotation_axis",
    "upsample_features",
]

__version__ = "0.1.0"
