"""Finite-difference gradient suite over the repo's two losses."""

from __future__ import annotations

import numpy as np
import torch

from .field import SamplingSpec, photometric_loss
from .optim import GROUP_ORDER, ParamSet, grad_check_groups
from .rays import prd_loss, prd_terms


def perturb(cameras, seed=0, scale=1.0):
    """Move every camera residual off zero so checks run at a generic point."""
    rng = np.random.default_rng([seed, 3])
    sizes = {"df": 0.5, "dc": 0.3, "zk": 0.02, "da": 2e-3, "dt": 5e-3, "zd": 1e-3, "zo": 1e-3}
    with torch.no_grad():
        for cam in cameras:
            for name, t in cam.residuals().items():
                t.copy_(torch.from_numpy(rng.normal(0.0, scale * sizes[name], tuple(t.shape))))
    return cameras


def photometric_closure(field, cameras, images, spec: SamplingSpec, image=0, batch=64, seed=0):
    rng = np.random.default_rng([seed, 5])
    cam = cameras[image]
    h, w = images.shape[1:3]
    ys, xs = rng.integers(0, h, batch), rng.integers(0, w, batch)
    pix = torch.from_numpy(np.stack([xs + rng.random(batch), ys + rng.random(batch)], -1))
    gt = torch.from_numpy(np.asarray(images[image])[ys, xs])
    return lambda: photometric_loss(field, cam, pix, gt, spec)


def prd_closure(cameras, corrs, eta=5.0):
    return lambda: prd_loss(cameras, corrs, eta)[0]


def smooth_subset(cameras, corrs, eta=5.0, margin=0.05):
    """Correspondences whose distance sits at least ``margin`` px away from the
    two places the PRD loss is not differentiable: zero (the norm) and ``eta``
    (the cut-off). Central differences are only meaningful there."""
    keep = []
    with torch.no_grad():
        for c in corrs:
            d, ok = prd_terms(cameras[c.cam_a], cameras[c.cam_b], [c.p_a], [c.p_b])
            if bool(ok[0]) and margin < float(d[0]) < eta - margin:
                keep.append(c)
    return keep


def gradient_suite(scene, eps=1e-5, per_group=8, seed=0, batch=64, samples=48):
    """Relative FD error per group for the photometric and PRD losses.

    Returns {"photometric": {group: err}, "prd": {group: err}}. The scene's
    cameras are copied and perturbed; the field is copied.
    """
    cams = perturb([c.clone() for c in scene.cameras], seed)
    field = scene.field.clone()
    spec = SamplingSpec(scene.spec.near, scene.spec.far, samples)
    params = ParamSet.from_scene(field, cams)
    photo = photometric_closure(field, cams, scene.images, spec, image=len(cams) // 2, batch=batch, seed=seed)
    out = {"photometric": grad_check_groups(photo, params, eps, per_group, seed=seed)}
    cam_params = ParamSet.from_scene(None, cams)
    corrs = smooth_subset(cams, scene.corrs)
    out["prd"] = grad_check_groups(prd_closure(cams, corrs), cam_params, eps, per_group, seed=seed)
    return out


def worst(report):
    return max((err for per in report.values() for err in per.values()), default=0.0)


def format_report(report):
    lines = []
    for loss, per in report.items():
        for g in GROUP_ORDER:
            if g in per:
                lines.append(f"{loss:12s} {g.value:11s} {per[g]:.3e}")
    return lines
