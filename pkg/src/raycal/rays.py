"""Closest points between rays, projected ray distance and chirality."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
import torch

from .camera import DTYPE, CameraParams, Ray, as_tensor, project_masked, unproject, world_to_camera
from .errors import ParallelRays

PARALLEL_EPS = 1e-12
DEFAULT_ETA = 5.0


@dataclass(frozen=True)
class Correspondence:
    cam_a: int
    cam_b: int
    p_a: tuple
    p_b: tuple

    def __post_init__(self):
        if self.cam_a == self.cam_b:
            raise ValueError("a correspondence needs two distinct cameras")


class RayPair(NamedTuple):
    ray_a: Ray
    ray_b: Ray
    t_hat_a: torch.Tensor
    t_hat_b: torch.Tensor
    x_a: torch.Tensor
    x_b: torch.Tensor


def _cross(u, v):
    return torch.linalg.cross(u, v, dim=-1)


def _dot(u, v):
    return (u * v).sum(-1)


def _safe_norm(v):
    # exact zero with a zero subgradient instead of NaN
    s = (v * v).sum(-1)
    pos = s > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, s, torch.ones_like(s))), torch.zeros_like(s))


def closest_points_masked(ray_a: Ray, ray_b: Ray):
    """Vectorised closest points; returns (RayPair, non-parallel mask)."""
    oa, da = as_tensor(ray_a.origin), as_tensor(ray_a.direction)
    ob, db = as_tensor(ray_b.origin), as_tensor(ray_b.direction)
    n = _cross(da, db)
    n2 = _dot(n, n)
    ok = n2.detach() >= PARALLEL_EPS
    n2s = torch.where(ok, n2, torch.ones_like(n2))
    w = ob - oa
    t_b = _dot(_cross(w, da), n) / n2s
    t_a = _dot(_cross(w, db), n) / n2s
    x_a = oa + t_a[..., None] * da
    x_b = ob + t_b[..., None] * db
    return RayPair(Ray(oa, da), Ray(ob, db), t_a, t_b, x_a, x_b), ok


def closest_points(ray_a: Ray, ray_b: Ray) -> RayPair:
    pair, ok = closest_points_masked(ray_a, ray_b)
    if not bool(ok.all()):
        raise ParallelRays("rays are parallel")
    return pair


def ray_distance(ray_a: Ray, ray_b: Ray):
    oa, da = as_tensor(ray_a.origin), as_tensor(ray_a.direction)
    ob, db = as_tensor(ray_b.origin), as_tensor(ray_b.direction)
    n = _cross(da, db)
    n2 = _dot(n, n)
    if bool((n2.detach() < PARALLEL_EPS).any()):
        raise ParallelRays("rays are parallel")
    return _dot(oa - ob, n).abs() / torch.sqrt(n2)


def chirality_valid(cam_a: CameraParams, cam_b: CameraParams, x_a, x_b):
    """Both closest points must sit in front of the *other* camera."""
    za = world_to_camera(cam_a, x_b)[..., 2]
    zb = world_to_camera(cam_b, x_a)[..., 2]
    return (za.detach() > 0) & (zb.detach() > 0)


def prd_terms(cam_a: CameraParams, cam_b: CameraParams, p_a, p_b):
    """Per-correspondence projected ray distance in pixels and a validity mask.

    Invalid entries (parallel rays, chirality, failed projection) hold zero
    and are excluded by the mask; the threshold is applied by the caller.
    """
    p_a, p_b = as_tensor(p_a), as_tensor(p_b)
    ray_a, ray_b = unproject(cam_a, p_a), unproject(cam_b, p_b)
    pair, ok = closest_points_masked(ray_a, ray_b)
    ok = ok & chirality_valid(cam_a, cam_b, pair.x_a, pair.x_b)
    proj_a, ok_a = project_masked(cam_a, pair.x_b)
    proj_b, ok_b = project_masked(cam_b, pair.x_a)
    ok = ok & ok_a & ok_b
    d = 0.5 * (_safe_norm(proj_a - p_a) + _safe_norm(proj_b - p_b))
    ok = ok & torch.isfinite(d.detach())
    d = torch.where(ok, d, torch.zeros_like(d))
    return d, ok


def projected_ray_distance(cam_a: CameraParams, cam_b: CameraParams, corr: Correspondence, eta=None):
    """Scalar PRD for one correspondence, or None when the pair is skipped."""
    d, ok = prd_terms(cam_a, cam_b, [corr.p_a], [corr.p_b])
    if not bool(ok[0]):
        return None
    if eta is not None and float(d[0].detach()) > eta:
        return None
    return d[0]


def group_by_pair(corrs: Sequence[Correspondence]):
    """Map (cam_a, cam_b) -> (p_a array, p_b array), preserving input order."""
    grouped = defaultdict(lambda: ([], []))
    for c in corrs:
        pa, pb = grouped[(c.cam_a, c.cam_b)]
        pa.append(c.p_a)
        pb.append(c.p_b)
    return {k: (np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)) for k, (a, b) in grouped.items()}


def prd_loss(cameras, corrs, eta=DEFAULT_ETA):
    """Mean projected ray distance over valid correspondences below ``eta``.

    ``corrs`` is either a list of Correspondence or the dict produced by
    :func:`group_by_pair`. Returns (loss, valid count); loss is a constant
    zero when nothing is valid.
    """
    if eta <= 0:
        raise ValueError("eta must be positive")
    grouped = corrs if isinstance(corrs, dict) else group_by_pair(corrs)
    total = None
    count = 0
    for (a, b), (pa, pb) in grouped.items():
        d, ok = prd_terms(cameras[a], cameras[b], pa, pb)
        keep = ok & (d.detach() <= eta)
        n = int(keep.sum())
        if n == 0:
            continue
        s = torch.where(keep, d, torch.zeros_like(d)).sum()
        total = s if total is None else total + s
        count += n
    if count == 0:
        return torch.zeros((), dtype=DTYPE), 0
    return total / count, count
