"""Differentiable camera: pinhole intrinsics with residuals, 6-vector rotation,
a fourth-order radial term and bilinearly interpolated per-pixel ray offsets.

Conventions: R maps camera to world, t is the camera centre in world
coordinates, the camera looks down +z with x right and y down. Pixel (0, 0)
is the top-left image corner, so pixel centres sit at half-integers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import torch

from .errors import BehindCamera, DegenerateRotation, NonConvergent, OutOfBounds

DTYPE = torch.float64

NEWTON_STEPS = 10
PROJECT_TOL = 1e-6
MIN_DEPTH = 1e-9


def as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(DTYPE)
    return torch.as_tensor(x, dtype=DTYPE)


class Ray(NamedTuple):
    """World-space ray batch. Directions are not unit length."""

    origin: torch.Tensor
    direction: torch.Tensor

    def at(self, t):
        return self.origin + as_tensor(t)[..., None] * self.direction


def rotation_from_6vec(a) -> torch.Tensor:
    """Gram-Schmidt the two 3-columns packed in ``a[..., :6]`` into a rotation."""
    a = as_tensor(a)
    a1, a2 = a[..., :3], a[..., 3:6]
    n1 = torch.linalg.vector_norm(a1, dim=-1, keepdim=True)
    if bool((n1.detach() < 1e-12).any()):
        raise DegenerateRotation("first column of the 6-vector is zero")
    b1 = a1 / n1
    u = a2 - (b1 * a2).sum(-1, keepdim=True) * b1
    nu = torch.linalg.vector_norm(u, dim=-1, keepdim=True)
    if bool((nu.detach() < 1e-12).any()):
        raise DegenerateRotation("second column of the 6-vector is parallel to the first")
    b2 = u / nu
    b3 = torch.linalg.cross(b1, b2, dim=-1)
    return torch.stack([b1, b2, b3], dim=-1)


def sixvec_from_rotation(R) -> torch.Tensor:
    R = as_tensor(R)
    return torch.cat([R[..., :, 0], R[..., :, 1]], dim=-1)


def axis_angle_matrix(axis, angle) -> torch.Tensor:
    """Rodrigues' formula; ``axis`` is normalised here, ``angle`` in radians."""
    axis = as_tensor(axis)
    axis = axis / torch.linalg.vector_norm(axis)
    x, y, z = axis.tolist()
    K = torch.tensor([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]], dtype=DTYPE)
    s, c = math.sin(angle), math.cos(angle)
    return torch.eye(3, dtype=DTYPE) + s * K + (1.0 - c) * (K @ K)


def apply_radial(p, c, k) -> torch.Tensor:
    """Distort pixels ``p`` (..., 2) to homogeneous ``p'`` (..., 3).

    The offset from the principal point is normalised by the principal point
    itself and the polynomial scales the absolute pixel coordinate.
    """
    p, c, k = as_tensor(p), as_tensor(c), as_tensor(k)
    n = (p - c) / c
    n2 = n * n
    d = 1.0 + k[0] * n2 + k[1] * n2 * n2
    pd = p * d
    return torch.cat([pd, torch.ones_like(pd[..., :1])], dim=-1)


def _undistort_axis(target, c, k1, k2):
    """Newton iterations solving ``p * d(p) = target`` for one pixel axis."""

    def residual(p):
        n = (p - c) / c
        n2 = n * n
        return p * (1.0 + k1 * n2 + k2 * n2 * n2) - target

    def slope(p):
        n = (p - c) / c
        n2 = n * n
        return 1.0 + k1 * n2 + k2 * n2 * n2 + (p / c) * (2.0 * k1 * n + 4.0 * k2 * n2 * n)

    with torch.no_grad():
        p = target.detach().clone()
        cd, k1d, k2d, td = c.detach(), k1.detach(), k2.detach(), target.detach()
        for _ in range(NEWTON_STEPS):
            n = (p - cd) / cd
            n2 = n * n
            h = p * (1.0 + k1d * n2 + k2d * n2 * n2) - td
            dh = 1.0 + k1d * n2 + k2d * n2 * n2 + (p / cd) * (2.0 * k1d * n + 4.0 * k2d * n2 * n)
            p = p - h / dh
    # one tracked step from the converged point carries the implicit derivative
    p = p - residual(p) / slope(p).detach()
    return p, residual(p).detach().abs()


@dataclass
class CameraParams:
    """Frozen initialisation plus zero-initialised learnable residuals.

    Every learnable tensor is a leaf with ``requires_grad``; the optimizer
    updates them in place.
    """

    width: int
    height: int
    f0: torch.Tensor
    c0: torch.Tensor
    k0: torch.Tensor
    a0: torch.Tensor
    t0: torch.Tensor
    zd0: torch.Tensor
    zo0: torch.Tensor
    df: torch.Tensor = field(default=None)
    dc: torch.Tensor = field(default=None)
    da: torch.Tensor = field(default=None)
    dt: torch.Tensor = field(default=None)
    zk: torch.Tensor = field(default=None)
    zd: torch.Tensor = field(default=None)
    zo: torch.Tensor = field(default=None)

    RESIDUALS = ("df", "dc", "zk", "da", "dt", "zd", "zo")

    def __post_init__(self):
        for name in ("f0", "c0", "k0", "a0", "t0", "zd0", "zo0"):
            setattr(self, name, as_tensor(getattr(self, name)).detach().clone())
        shapes = {"df": (2,), "dc": (2,), "zk": (2,), "da": (6,), "dt": (3,),
                  "zd": tuple(self.zd0.shape), "zo": tuple(self.zo0.shape)}
        for name, shape in shapes.items():
            value = getattr(self, name)
            value = torch.zeros(shape, dtype=DTYPE) if value is None else as_tensor(value).detach().clone()
            setattr(self, name, value.requires_grad_(True))

    @classmethod
    def create(cls, width, height, focal, principal, rotation=None, translation=(0.0, 0.0, 0.0),
               radial=(0.0, 0.0), raxel_shape=None, a6=None):
        """Build a camera from a 3x3 ``rotation`` (or a raw 6-vector ``a6``)."""
        if a6 is None:
            a6 = sixvec_from_rotation(torch.eye(3, dtype=DTYPE) if rotation is None else rotation)
        if raxel_shape is None:
            raxel_shape = default_raxel_shape(width, height)
        gw, gh = raxel_shape
        if gw < 2 or gh < 2:
            raise ValueError("raxel grid must be at least 2x2")
        zeros = torch.zeros((gh, gw, 3), dtype=DTYPE)
        focal = [focal, focal] if isinstance(focal, (int, float)) else focal
        return cls(int(width), int(height), focal, principal, radial, a6, translation, zeros, zeros)

    # effective parameters
    @property
    def focal(self):
        return self.f0 + self.df

    @property
    def principal(self):
        return self.c0 + self.dc

    @property
    def radial(self):
        return self.k0 + self.zk

    @property
    def rotation(self):
        return rotation_from_6vec(self.a0 + self.da)

    @property
    def translation(self):
        return self.t0 + self.dt

    @property
    def raxel_dir(self):
        return self.zd0 + self.zd

    @property
    def raxel_origin(self):
        return self.zo0 + self.zo

    @property
    def raxel_shape(self):
        return int(self.zd0.shape[1]), int(self.zd0.shape[0])

    def residuals(self):
        return {name: getattr(self, name) for name in self.RESIDUALS}

    def clone(self) -> "CameraParams":
        kw = {name: getattr(self, name) for name in ("f0", "c0", "k0", "a0", "t0", "zd0", "zo0")}
        kw.update({name: getattr(self, name).detach() for name in self.RESIDUALS})
        return CameraParams(self.width, self.height, **kw)

    def baked(self) -> "CameraParams":
        """Copy with residuals folded into the initialisation and reset to zero."""
        with torch.no_grad():
            return CameraParams(
                self.width, self.height, self.focal, self.principal, self.radial,
                self.a0 + self.da, self.translation, self.raxel_dir, self.raxel_origin)

    def check(self):
        f = self.focal.detach()
        c = self.principal.detach()
        if not bool((f > 0).all()):
            raise ValueError(f"effective focal length must be positive, got {f.tolist()}")
        w, h = self.width, self.height
        if not (-0.5 * w <= c[0] <= 1.5 * w and -0.5 * h <= c[1] <= 1.5 * h):
            raise ValueError(f"principal point {c.tolist()} outside image bounds margin")
        self.rotation


def default_raxel_shape(width, height):
    return max(2, math.ceil(width / 8)), max(2, math.ceil(height / 8))


def raxel_weights(grid_shape, size, p):
    """Corner indices and bilinear weights of pixels ``p`` on a control grid.

    The grid spans the image rectangle ``[0, W] x [0, H]`` with nodes at both
    edges. Returns (flat indices (..., 4), weights (..., 4)).
    """
    gw, gh = grid_shape
    width, height = size
    p = as_tensor(p)
    px, py = p[..., 0], p[..., 1]
    pd = p.detach()
    if bool(((pd[..., 0] < 0) | (pd[..., 0] > width) | (pd[..., 1] < 0) | (pd[..., 1] > height)).any()):
        raise OutOfBounds(f"pixel outside [0, {width}] x [0, {height}]")
    u = px * ((gw - 1) / width)
    v = py * ((gh - 1) / height)
    i0 = torch.clamp(torch.floor(u.detach()), 0, gw - 2)
    j0 = torch.clamp(torch.floor(v.detach()), 0, gh - 2)
    fx, fy = u - i0, v - j0
    i0, j0 = i0.long(), j0.long()
    idx = torch.stack([j0 * gw + i0, j0 * gw + i0 + 1, (j0 + 1) * gw + i0, (j0 + 1) * gw + i0 + 1], -1)
    w = torch.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], -1)
    return idx, w


def raxel_offset(cam: CameraParams, p):
    """Interpolated (direction offset, origin offset) at pixels ``p``."""
    idx, w = raxel_weights(cam.raxel_shape, (cam.width, cam.height), p)
    zd = cam.raxel_dir.reshape(-1, 3)[idx]
    zo = cam.raxel_origin.reshape(-1, 3)[idx]
    return (w[..., None] * zd).sum(-2), (w[..., None] * zo).sum(-2)


def unproject(cam: CameraParams, p) -> Ray:
    p = as_tensor(p)
    f, c = cam.focal, cam.principal
    pd = apply_radial(p, c, cam.radial)
    local = torch.stack([(pd[..., 0] - c[0]) / f[0], (pd[..., 1] - c[1]) / f[1], pd[..., 2]], -1)
    d = local @ cam.rotation.T
    o = cam.translation.expand(d.shape)
    dd, do = raxel_offset(cam, p)
    return Ray(o + do, d + dd)


def camera_to_world(cam: CameraParams, y):
    return as_tensor(y) @ cam.rotation.T + cam.translation


def world_to_camera(cam: CameraParams, x):
    return (as_tensor(x) - cam.translation) @ cam.rotation


def project_masked(cam: CameraParams, x):
    """Projection that reports failures per point instead of raising.

    Returns (pixels, ok) where ``ok`` marks positive depth and a converged
    radial inversion. Raxel offsets are not modelled here.
    """
    q = world_to_camera(cam, x)
    z = q[..., 2]
    ok = z.detach() > MIN_DEPTH
    zs = torch.where(ok, z, torch.ones_like(z))
    f, c, k = cam.focal, cam.principal, cam.radial
    target_x = f[0] * q[..., 0] / zs + c[0]
    target_y = f[1] * q[..., 1] / zs + c[1]
    px, rx = _undistort_axis(target_x, c[0], k[0], k[1])
    py, ry = _undistort_axis(target_y, c[1], k[0], k[1])
    converged = (rx <= PROJECT_TOL) & (ry <= PROJECT_TOL)
    ok = ok & converged & torch.isfinite(px.detach()) & torch.isfinite(py.detach())
    return torch.stack([px, py], -1), ok


def project(cam: CameraParams, x):
    q = world_to_camera(cam, x)
    if bool((q[..., 2].detach() <= MIN_DEPTH).any()):
        raise BehindCamera("point has non-positive camera depth")
    p, ok = project_masked(cam, x)
    if not bool(ok.all()):
        raise NonConvergent(f"radial inversion residual above {PROJECT_TOL} px")
    return p
