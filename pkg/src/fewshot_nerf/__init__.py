"""Few-view neural radiance fields regularised by matched-ray geometry.

Everything runs on numpy with an in-house reverse-mode autodiff. Matched pixel
pairs between training views supply a depth-consistency signal on top of the
photometric loss, and analytic scenes provide exact ground truth for scoring.
"""

from .field import EncodingConfig, FieldConfig, FieldParams, field_eval, field_forward, frequency_mask
from .geometry import Camera, CameraIntrinsics, CameraPose, Ray, generate_ray, generate_rays, ray_min_distance
from .renderer import render, render_image, render_rays
from .scenes import Scene, make_scene, oracle_render
from .trainer import TrainConfig, lr_at, train

__version__ = "0.1.0"

__all__ = [
    "Camera", "CameraIntrinsics", "CameraPose", "EncodingConfig", "FieldConfig", "FieldParams", "Ray",
    "Scene", "TrainConfig", "field_eval", "field_forward", "frequency_mask", "generate_ray", "generate_rays",
    "lr_at", "make_scene", "oracle_render", "ray_min_distance", "render", "render_image", "render_rays", "train",
]
