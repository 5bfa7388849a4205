"""Differentiable camera self-calibration with a voxel radiance field.

Submodules:

- ``camera``: pinhole + radial + per-pixel ray-offset camera model
- ``rays``: closest points between rays and the projected ray distance loss
- ``field``: voxel radiance field, quadrature renderer, photometric loss
- ``optim``: parameter groups, Adam, finite-difference checks
- ``calibration``: curriculum schedule and the joint training loop
- ``synth``: synthetic scenes, exact correspondences, noise injection
- ``metrics`` and ``fileio``: image/camera metrics and on-disk formats
- ``experiments``: recovery and ablation runs on the synthetic scene
"""

from .camera import CameraParams, Ray, project, unproject
from .errors import RaycalError
from .field import RadianceField, SamplingSpec, render_image, render_ray
from .optim import Group

__version__ = "0.1.0"
