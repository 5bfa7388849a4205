"""Dense voxel radiance field and the quadrature renderer.

Voxel nodes span the bounds inclusively (node 0 on the lower face, node N-1
on the upper face). Activations are applied per node and the activated values
are interpolated trilinearly, so density stays non-negative and colour stays
in the unit cube everywhere. The in-cell fraction along each axis is passed
through smoothstep first, which keeps node values and cell-centre means but
makes the field C1 across cell faces (finite differences of camera
parameters otherwise pick up the trilinear kinks).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .camera import DTYPE, CameraParams, Ray, as_tensor, unproject
from .errors import NonFinite


def softplus_inverse(sigma):
    sigma = torch.clamp(as_tensor(sigma), min=1e-12)
    return torch.where(sigma > 30.0, sigma, torch.log(torch.expm1(sigma)))


def logit(c, eps=1e-6):
    c = torch.clamp(as_tensor(c), eps, 1.0 - eps)
    return torch.log(c) - torch.log1p(-c)


class RadianceField:
    """Grid of raw parameters shaped (4, Nz, Ny, Nx): density logit then RGB logits."""

    def __init__(self, params, lo=(-1.0, -1.0, -1.0), hi=(1.0, 1.0, 1.0)):
        params = as_tensor(params).detach().clone()
        if params.ndim != 4 or params.shape[0] != 4 or min(params.shape[1:]) < 2:
            raise ValueError(f"field parameters must be (4, Nz, Ny, Nx) with N >= 2, got {tuple(params.shape)}")
        self.params = params.requires_grad_(True)
        self.lo = as_tensor(lo).detach().clone()
        self.hi = as_tensor(hi).detach().clone()
        if not bool((self.hi > self.lo).all()):
            raise ValueError("field bounds must have hi > lo")

    @classmethod
    def constant(cls, shape, lo=(-1.0, -1.0, -1.0), hi=(1.0, 1.0, 1.0), sigma=0.1, color=0.5):
        nx, ny, nz = shape
        params = torch.empty((4, nz, ny, nx), dtype=DTYPE)
        params[0] = softplus_inverse(torch.tensor(float(sigma)))
        params[1:] = logit(torch.tensor(float(color)))
        return cls(params, lo, hi)

    @classmethod
    def from_values(cls, sigma, color, lo=(-1.0, -1.0, -1.0), hi=(1.0, 1.0, 1.0)):
        """``sigma`` shaped (Nz, Ny, Nx), ``color`` shaped (Nz, Ny, Nx, 3)."""
        sigma, color = as_tensor(sigma), as_tensor(color)
        params = torch.cat([softplus_inverse(sigma)[None], logit(color).permute(3, 0, 1, 2)], 0)
        return cls(params, lo, hi)

    @property
    def shape(self):
        return int(self.params.shape[3]), int(self.params.shape[2]), int(self.params.shape[1])

    def node_positions(self):
        """World positions of all nodes, shaped (Nz, Ny, Nx, 3)."""
        nx, ny, nz = self.shape
        axes = [torch.linspace(float(self.lo[i]), float(self.hi[i]), n, dtype=DTYPE)
                for i, n in enumerate((nx, ny, nz))]
        z, y, x = torch.meshgrid(axes[2], axes[1], axes[0], indexing="ij")
        return torch.stack([x, y, z], -1)

    def activated(self):
        return torch.cat([F.softplus(self.params[:1]), torch.sigmoid(self.params[1:])], 0)

    def query(self, x):
        x = as_tensor(x)
        lead = x.shape[:-1]
        pts = x.reshape(-1, 3)
        size = torch.tensor(self.shape, dtype=DTYPE) - 1.0
        u = (pts - self.lo) / (self.hi - self.lo) * size
        cell = torch.floor(u.detach())
        fr = u - cell
        u = cell + fr * fr * (3.0 - 2.0 * fr)
        g = 2.0 * u / size - 1.0
        vals = F.grid_sample(self.activated()[None], g.reshape(1, -1, 1, 1, 3),
                             mode="bilinear", padding_mode="zeros", align_corners=True)
        vals = vals.reshape(4, -1)
        pd = pts.detach()
        inside = ((pd >= self.lo) & (pd <= self.hi)).all(-1)
        vals = torch.where(inside, vals, torch.zeros_like(vals))
        return vals[0].reshape(lead), vals[1:].T.reshape(*lead, 3)

    def clone(self):
        return RadianceField(self.params.detach(), self.lo, self.hi)


def field_query(field, x):
    return field.query(x)


@dataclass
class SamplingSpec:
    near: float
    far: float
    samples: int = 64
    stratified: bool = False
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.near < self.far:
            raise ValueError("need 0 < near < far")
        if self.samples < 2:
            raise ValueError("need at least two samples per ray")

    def sample_t(self, n_rays, rng=None):
        """Sample depths (n_rays, N) in [near, far) and their segment lengths."""
        n = self.samples
        step = (self.far - self.near) / n
        base = torch.arange(n, dtype=DTYPE)
        if self.stratified:
            rng = np.random.default_rng(self.seed) if rng is None else rng
            u = torch.from_numpy(rng.random((n_rays, n)))
        else:
            u = torch.zeros((n_rays, n), dtype=DTYPE)
        t = self.near + (base + u) * step
        delta = torch.cat([t[:, 1:] - t[:, :-1], self.far - t[:, -1:]], -1)
        return t, delta


def composite_weights(sigma, delta, dnorm):
    """Per-sample weights (prod of earlier transparencies) * (1 - own transparency)."""
    tau = sigma * delta * dnorm[..., None]
    opacity = -torch.expm1(-tau)
    before = torch.cumsum(tau, -1) - tau
    w = torch.exp(-before) * opacity
    # the weights telescope to 1 - T_final, but summing them rounds; on nearly
    # opaque rays the sum can land a few ulp above 1. A detached rescale keeps
    # the bound exact and is the identity for every other ray.
    guard = torch.clamp(w.detach().sum(-1, keepdim=True) * (1.0 + 1e-12), min=1.0)
    return w / guard


def render_ray(field, ray: Ray, spec: SamplingSpec, rng=None, return_weights=False):
    """Composite colours along each ray of a batch (origin/direction shaped (R, 3))."""
    o, d = as_tensor(ray.origin), as_tensor(ray.direction)
    single = o.ndim == 1
    if single:
        o, d = o[None], d[None]
    t, delta = spec.sample_t(o.shape[0], rng)
    pts = o[:, None, :] + t[..., None] * d[:, None, :]
    sigma, color = field.query(pts)
    w = composite_weights(sigma, delta, torch.linalg.vector_norm(d, dim=-1))
    with torch.no_grad():
        wsum = w.sum(-1)
        if not bool((w >= 0).all() and (wsum <= 1.0).all()):
            raise NonFinite("rendering weights left [0, 1] (non-finite field or ray?)")
    rgb = (w[..., None] * color).sum(-2)
    if single:
        rgb, w = rgb[0], w[0]
    return (rgb, w) if return_weights else rgb


def pixel_centers(width, height):
    ys, xs = torch.meshgrid(torch.arange(height, dtype=DTYPE) + 0.5,
                            torch.arange(width, dtype=DTYPE) + 0.5, indexing="ij")
    return torch.stack([xs, ys], -1)


def render_image(field, cam: CameraParams, spec: SamplingSpec, chunk=4096):
    """Render every pixel centre; returns a numpy array (H, W, 3)."""
    pix = pixel_centers(cam.width, cam.height).reshape(-1, 2)
    rng = np.random.default_rng(spec.seed) if spec.stratified else None
    out = []
    with torch.no_grad():
        for s in range(0, pix.shape[0], chunk):
            out.append(render_ray(field, unproject(cam, pix[s:s + chunk]), spec, rng))
    return torch.cat(out).reshape(cam.height, cam.width, 3).numpy()


def photometric_loss(field, cam: CameraParams, pixels, gt, spec: SamplingSpec, rng=None):
    """Batch mean of squared colour error summed over channels."""
    pixels, gt = as_tensor(pixels), as_tensor(gt)
    if pixels.shape[0] == 0:
        raise ValueError("empty pixel batch")
    rgb = render_ray(field, unproject(cam, pixels), spec, rng)
    return ((rgb - gt) ** 2).sum(-1).mean()
