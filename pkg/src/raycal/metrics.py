"""Image quality and camera recovery metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from numpy.lib.stride_tricks import sliding_window_view

from .errors import CountMismatch, DimensionMismatch, TooSmall

PSNR_CAP = 99.0


def _pair(img, ref):
    img = np.asarray(img, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if img.shape != ref.shape:
        raise DimensionMismatch(f"image shapes differ: {img.shape} vs {ref.shape}")
    return img, ref


def psnr(img, ref):
    """PSNR in dB for images in [0, 1]; identical images give ``PSNR_CAP``."""
    img, ref = _pair(img, ref)
    mse = float(np.mean((img - ref) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def gaussian_window(size=11, sigma=1.5):
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-0.5 * (x / sigma) ** 2)
    g /= g.sum()
    return np.outer(g, g)


def _filter(x, win):
    # valid-mode correlation over the two leading axes
    return np.einsum("ijkl,kl->ij", sliding_window_view(x, win.shape), win)


def ssim(img, ref, k1=0.01, k2=0.03, size=11, sigma=1.5):
    """Mean SSIM over valid windows, averaged across channels (data range 1)."""
    img, ref = _pair(img, ref)
    if min(img.shape[0], img.shape[1]) < size:
        raise TooSmall(f"SSIM needs both sides >= {size}, got {img.shape[:2]}")
    if img.ndim == 2:
        img, ref = img[..., None], ref[..., None]
    win = gaussian_window(size, sigma)
    c1, c2 = k1**2, k2**2
    scores = []
    for ch in range(img.shape[2]):
        x, y = img[..., ch], ref[..., ch]
        mx, my = _filter(x, win), _filter(y, win)
        sxx = _filter(x * x, win) - mx * mx
        syy = _filter(y * y, win) - my * my
        sxy = _filter(x * y, win) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        scores.append(float(np.mean(num / den)))
    return float(np.mean(scores))


@dataclass
class CameraError:
    focal_pct: np.ndarray
    rotation_deg: np.ndarray
    translation: np.ndarray

    @property
    def mean_focal_pct(self):
        return float(self.focal_pct.mean())

    @property
    def mean_rotation_deg(self):
        return float(self.rotation_deg.mean())

    @property
    def mean_translation(self):
        return float(self.translation.mean())


def geodesic_deg(R_a, R_b):
    R_a, R_b = np.asarray(R_a, dtype=np.float64), np.asarray(R_b, dtype=np.float64)
    c = (np.trace(R_a.T @ R_b) - 1.0) / 2.0
    return math.degrees(math.acos(min(1.0, max(-1.0, c))))


def camera_error(gt, est, skip=()):
    """Per-camera focal error (percent, mean of both axes), rotation angle and
    camera-centre distance. ``skip`` lists cameras left out (e.g. a frozen gauge camera)."""
    if len(gt) != len(est):
        raise CountMismatch(f"{len(gt)} ground-truth cameras vs {len(est)} estimates")
    foc, rot, trn = [], [], []
    with torch.no_grad():
        for i, (g, e) in enumerate(zip(gt, est)):
            if i in skip:
                continue
            fg, fe = g.focal.numpy(), e.focal.numpy()
            foc.append(100.0 * float(np.mean(np.abs(fe - fg) / fg)))
            rot.append(geodesic_deg(g.rotation.numpy(), e.rotation.numpy()))
            trn.append(float(np.linalg.norm(e.translation.numpy() - g.translation.numpy())))
    return CameraError(np.array(foc), np.array(rot), np.array(trn))
