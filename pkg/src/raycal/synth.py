"""Ground-truth scenes, exact correspondences and camera noise injection."""

from __future__ import annotations

import colorsys
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .camera import CameraParams, axis_angle_matrix, project_masked
from .errors import InsufficientGeometry
from .field import RadianceField, SamplingSpec, render_image
from .rays import Correspondence, prd_terms


@dataclass
class Blob:
    center: np.ndarray
    width: float
    amplitude: float
    color: np.ndarray


@dataclass
class SyntheticScene:
    field: RadianceField
    cameras: list
    images: np.ndarray  # (M, H, W, 3)
    corrs: list
    spec: SamplingSpec
    seed: int
    blobs: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)
    # camera index pairs (a < b) that received correspondences
    pairs: list = field(default_factory=list)


@dataclass
class NoiseSpec:
    focal_pct: float = 0.0
    trans_range: float = 0.0
    rot_range: float = 0.0
    seed: int = 0
    # cameras whose pose is left untouched (e.g. the gauge camera)
    keep_pose: tuple = ()

    def __post_init__(self):
        if min(self.focal_pct, self.trans_range, self.rot_range) < 0:
            raise ValueError("noise ranges must be non-negative")


@dataclass
class NoiseDraw:
    focal_scale: float
    translations: np.ndarray  # (M, 3)
    rotations: list  # (axis, angle in radians) per camera


def look_at(position, target=(0.0, 0.0, 0.0), down=(0.0, 1.0, 0.0)):
    """Camera-to-world rotation for a camera at ``position`` facing ``target``."""
    position, target, down = (np.asarray(v, dtype=np.float64) for v in (position, target, down))
    z = target - position
    z /= np.linalg.norm(z)
    x = np.cross(down, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return np.stack([x, y, z], axis=1)


def blob_values(blobs, points, extent=1.0):
    """Density and colour of a blob mixture at ``points`` (..., 3).

    Density is tapered to zero (with zero slope) on the faces of the
    ``extent`` box so that the field stays continuous where queries leave
    the bounds.
    """
    points = np.asarray(points, dtype=np.float64)
    sigma = np.zeros(points.shape[:-1])
    rgb = np.zeros(points.shape)
    for b in blobs:
        r2 = ((points - b.center) ** 2).sum(-1)
        g = b.amplitude * np.exp(-0.5 * r2 / b.width**2)
        # stripes give the photometric loss some texture to lock onto
        stripe = 0.8 + 0.2 * np.sin(9.0 * (points - b.center).sum(-1))
        sigma += g
        rgb += g[..., None] * np.clip(b.color * stripe[..., None], 0.0, 1.0)
    rgb = rgb / np.maximum(sigma, 1e-12)[..., None]
    taper = np.prod((1.0 - np.clip(np.abs(points) / extent, 0.0, 1.0) ** 4) ** 2, axis=-1)
    return sigma * taper, np.clip(rgb, 0.0, 1.0)


class AnalyticField:
    """The blob mixture evaluated in closed form; a drop-in for ``RadianceField.query``.

    Not differentiable; used as the smooth reference for quadrature checks.
    """

    def __init__(self, blobs, extent=1.0):
        self.blobs = blobs
        self.extent = extent

    def query(self, x):
        x = torch.as_tensor(x).detach()
        sigma, rgb = blob_values(self.blobs, x.numpy(), self.extent)
        return torch.from_numpy(sigma), torch.from_numpy(rgb)


def camera_ring(n, width, height, radius=4.0, arc_deg=60.0, elevation_deg=15.0, focal_scale=1.6):
    cams = []
    elev = math.radians(elevation_deg)
    for phi in np.linspace(-0.5 * arc_deg, 0.5 * arc_deg, n):
        phi = math.radians(phi)
        pos = radius * np.array([math.sin(phi) * math.cos(elev), -math.sin(elev), -math.cos(phi) * math.cos(elev)])
        R = look_at(pos)
        cams.append(CameraParams.create(width, height, focal_scale * width, (0.5 * width, 0.5 * height),
                                        rotation=R, translation=pos))
    return cams


def optical_axis(cam):
    with torch.no_grad():
        return cam.rotation[:, 2].numpy()


def axis_angle_deg(cam_a, cam_b):
    za, zb = optical_axis(cam_a), optical_axis(cam_b)
    c = float(np.dot(za, zb) / (np.linalg.norm(za) * np.linalg.norm(zb)))
    return math.degrees(math.acos(min(1.0, max(-1.0, c))))


def make_scene(seed=0, n_cameras=20, resolution=(32, 32), n_blobs=5, grid=32, samples=128,
               corrs_per_pair=16, max_pair_angle=60.0, extent=1.0, spread=0.45):
    if n_cameras < 2:
        raise ValueError("need at least two cameras")
    width, height = resolution
    if width < 8 or height < 8:
        raise ValueError("resolution must be at least 8x8")
    rng = np.random.default_rng(seed)
    hue0 = rng.random()
    blobs = []
    for k in range(n_blobs):
        hue = (hue0 + k / n_blobs) % 1.0
        color = np.array(colorsys.hsv_to_rgb(hue, 0.75, 0.9))
        blobs.append(Blob(center=rng.uniform(-spread, spread, 3) * extent,
                          width=float(rng.uniform(0.15, 0.3)) * extent,
                          amplitude=float(rng.uniform(6.0, 14.0)) / extent,
                          color=color))
    lo, hi = (-extent,) * 3, (extent,) * 3
    probe = RadianceField.constant((grid, grid, grid), lo, hi)
    sigma, rgb = blob_values(blobs, probe.node_positions().numpy(), extent)
    gt_field = RadianceField.from_values(sigma, rgb, lo, hi)

    radius = 4.0 * extent
    cameras = camera_ring(n_cameras, width, height, radius=radius)
    reach = math.sqrt(3.0) * extent
    spec = SamplingSpec(near=radius - reach, far=radius + reach, samples=samples)
    images = np.stack([render_image(gt_field, cam, spec) for cam in cameras])

    pairs = [(i, j) for i in range(n_cameras) for j in range(i + 1, n_cameras)
             if axis_angle_deg(cameras[i], cameras[j]) <= max_pair_angle + 1e-9]
    scene = SyntheticScene(gt_field, cameras, images, [], spec, seed, blobs,
                           meta={"n_cameras": n_cameras, "width": width, "height": height,
                                 "n_blobs": n_blobs, "grid": grid, "samples": samples,
                                 "corrs_per_pair": corrs_per_pair}, pairs=pairs)
    if corrs_per_pair > 0 and pairs:
        scene.corrs = gen_correspondences(scene, pairs, corrs_per_pair, seed=seed)
    return scene


def gen_correspondences(scene, pairs, count, seed=0, threshold=1.0, margin=0.5, noise_px=0.0,
                        return_points=False):
    """Project dense points of the GT field into camera pairs.

    Points are drawn where GT density exceeds ``threshold``; both pixels must
    land at least ``margin`` px inside the image and re-triangulate exactly.
    With ``return_points`` the source world points (K, 3) come back as well.
    """
    rng = np.random.default_rng([seed, 7])
    fld = scene.field
    lo, hi = fld.lo.numpy(), fld.hi.numpy()
    out, points = [], []
    for a, b in pairs:
        ca, cb = scene.cameras[a], scene.cameras[b]
        cand = rng.uniform(lo, hi, size=(100 * count, 3))
        with torch.no_grad():
            sigma, _ = fld.query(torch.from_numpy(cand))
            dense = sigma.numpy() > threshold
            x = torch.from_numpy(cand[dense])
            pa, oka = project_masked(ca, x)
            pb, okb = project_masked(cb, x)
            inside = oka & okb
            for p, cam in ((pa, ca), (pb, cb)):
                inside &= (p[:, 0] >= margin) & (p[:, 0] <= cam.width - margin)
                inside &= (p[:, 1] >= margin) & (p[:, 1] <= cam.height - margin)
            pa, pb, x = pa[inside], pb[inside], x[inside]
            if pa.shape[0]:
                d, ok = prd_terms(ca, cb, pa, pb)
                good = ok & (d < 1e-8)
                pa, pb, x = pa[good], pb[good], x[good]
        if pa.shape[0] < count:
            raise InsufficientGeometry(f"pair ({a}, {b}): {pa.shape[0]} of {count} correspondences found")
        pa, pb = pa[:count].numpy(), pb[:count].numpy()
        points.append(x[:count].numpy())
        if noise_px > 0:
            pa = pa + rng.normal(0.0, noise_px, pa.shape)
            pb = pb + rng.normal(0.0, noise_px, pb.shape)
        out.extend(Correspondence(a, b, tuple(u), tuple(v)) for u, v in zip(pa.tolist(), pb.tolist()))
    if return_points:
        return out, (np.concatenate(points) if points else np.zeros((0, 3)))
    return out


def draw_noise(n_cameras, spec: NoiseSpec) -> NoiseDraw:
    rng = np.random.default_rng([spec.seed, 11])
    trans = rng.uniform(-spec.trans_range, spec.trans_range, size=(n_cameras, 3)) if spec.trans_range else np.zeros((n_cameras, 3))
    rots = []
    for i in range(n_cameras):
        axis = rng.normal(size=3)
        angle = math.radians(rng.uniform(-spec.rot_range, spec.rot_range)) if spec.rot_range else 0.0
        rots.append((axis / np.linalg.norm(axis), angle))
    for i in spec.keep_pose:
        trans[i] = 0.0
        rots[i] = (rots[i][0], 0.0)
    return NoiseDraw(1.0 + spec.focal_pct / 100.0, trans, rots)


def apply_noise(cameras, draw: NoiseDraw):
    out = []
    for i, cam in enumerate(cameras):
        axis, angle = draw.rotations[i]
        a0 = cam.a0
        if angle != 0.0:
            Rn = axis_angle_matrix(axis, angle)
            a0 = torch.cat([Rn @ a0[:3], Rn @ a0[3:]])
        t0 = cam.t0 + torch.from_numpy(draw.translations[i])
        out.append(CameraParams(cam.width, cam.height, cam.f0 * draw.focal_scale, cam.c0, cam.k0,
                                a0, t0, cam.zd0, cam.zo0))
    return out


def inject_noise(cameras, spec: NoiseSpec):
    """Perturbed copies of ``cameras``; the inputs are left untouched."""
    return apply_noise(cameras, draw_noise(len(cameras), spec))
