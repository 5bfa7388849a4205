"""Scaled-down self-calibration experiments on the synthetic blob scene.

``run_recovery`` injects camera noise, runs the curriculum and reports camera
errors against ground truth; ``run_ablation`` trains the same noisy scene with
progressively more learnable components.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .calibration import CurriculumSchedule, TrainConfig, TrainState, calibrate
from .field import SamplingSpec, render_image
from .metrics import camera_error, psnr
from .optim import GROUP_ORDER, Group
from .rays import prd_loss
from .synth import NoiseSpec, inject_noise, make_scene


@dataclass
class ExperimentConfig:
    seed: int = 0
    noise_seed: int = 1
    n_cameras: int = 20
    resolution: tuple = (32, 32)
    n_blobs: int = 5
    grid: int = 16
    samples: int = 32
    corrs_per_pair: int = 16
    iterations: int = 3000
    batch: int = 1024
    boundaries: tuple = (300, 2600, 2800)
    prd_every: int = 10
    prd_weight: float = 0.1
    decay_steps: float = 1500.0
    lr: dict = field(default_factory=lambda: {
        Group.FIELD: 0.05, Group.INTRINSICS: 0.1, Group.EXTRINSICS: 3e-4,
        Group.RADIAL: 1e-4, Group.RAXEL: 1e-5,
    })

    def scaled(self, iterations):
        """Same run with a different budget: 300 field-only warm-up iterations,
        distortion phases in the last 13 %."""
        if iterations == self.iterations:
            return self
        n = iterations
        return dataclasses.replace(self, iterations=n, boundaries=(300, int(0.87 * n), int(0.93 * n)),
                                   decay_steps=n / 2)

    def scene(self):
        return make_scene(seed=self.seed, n_cameras=self.n_cameras, resolution=self.resolution,
                          n_blobs=self.n_blobs, grid=self.grid, samples=self.samples,
                          corrs_per_pair=self.corrs_per_pair)

    def train_config(self, groups=GROUP_ORDER, use_prd=True):
        return TrainConfig(
            seed=self.seed, iterations=self.iterations, batch=self.batch, samples=self.samples,
            schedule=CurriculumSchedule(boundaries=self.boundaries, prd_every=self.prd_every,
                                        prd_weight=self.prd_weight),
            lr=dict(self.lr), decay_steps=self.decay_steps, enabled_groups=tuple(groups),
            use_prd=use_prd, field_shape=(self.grid,) * 3,
        )


@dataclass
class RunResult:
    label: str
    focal_pct: float
    rotation_deg: float
    translation: float
    prd: float
    psnr: float
    seconds: float

    def line(self):
        return (f"{self.label:14s} focal {self.focal_pct:7.3f}%  rot {self.rotation_deg:.4f} deg  "
                f"trans {self.translation:.5f}  prd {self.prd:.4f} px  psnr {self.psnr:.2f} dB  "
                f"({self.seconds:.0f} s)")


def training_psnr(state: TrainState):
    """Mean PSNR of the learned field rendered through the learned cameras."""
    spec = SamplingSpec(state.spec.near, state.spec.far, state.spec.samples)
    scores = [psnr(render_image(state.field, cam, spec), img) for cam, img in zip(state.cameras, state.images)]
    return float(np.mean(scores))


def full_prd(cameras, corrs, eta=5.0):
    with torch.no_grad():
        value, _ = prd_loss(cameras, corrs, eta)
    return float(value)


def train(scene, noise: NoiseSpec, cfg: ExperimentConfig, label="run", groups=GROUP_ORDER, use_prd=True,
          progress=None):
    start = time.perf_counter()
    cameras = inject_noise(scene.cameras, noise)
    spec = SamplingSpec(scene.spec.near, scene.spec.far, cfg.samples)
    state = TrainState.fresh(scene.images, cameras, scene.corrs, spec, cfg.train_config(groups, use_prd))
    calibrate(state, progress=progress)
    # the gauge camera's pose is frozen, its intrinsics are not
    err = camera_error(scene.cameras, state.cameras)
    pose = camera_error(scene.cameras, state.cameras, skip=noise.keep_pose)
    return RunResult(label, err.mean_focal_pct, pose.mean_rotation_deg, pose.mean_translation,
                     full_prd(state.cameras, scene.corrs), training_psnr(state), time.perf_counter() - start)


RECOVERY_NOISE = {
    "focal": {"focal_pct": 10.0},
    "rotation": {"rot_range": 2.0},
    "translation": {"trans_range": 0.02},
}

# noise kind -> (camera error attribute, target)
RECOVERY_TARGETS = {
    "focal": ("focal_pct", 1.0),
    "rotation": ("rotation_deg", 0.2),
    "translation": ("translation", 0.005),
}


def run_recovery(kind, cfg: ExperimentConfig = None, scene=None, progress=None):
    cfg = cfg or ExperimentConfig()
    scene = scene or cfg.scene()
    noise = NoiseSpec(**RECOVERY_NOISE[kind], seed=cfg.noise_seed, keep_pose=(0,))
    return train(scene, noise, cfg, label=kind, progress=progress)


ABLATION_ROWS = (
    ("field-only", (Group.FIELD,), False),
    ("+IE", (Group.FIELD, Group.INTRINSICS, Group.EXTRINSICS), False),
    ("+IE+OD", GROUP_ORDER, False),
    ("+IE+OD+PRD", GROUP_ORDER, True),
)


def run_ablation(cfg: ExperimentConfig = None, scene=None, progress=None):
    """Focal plus rotation noise; returns one result per ablation row."""
    cfg = cfg or ExperimentConfig()
    scene = scene or cfg.scene()
    noise = NoiseSpec(focal_pct=10.0, rot_range=2.0, seed=cfg.noise_seed, keep_pose=(0,))
    return [train(scene, noise, cfg, label, groups, use_prd, progress) for label, groups, use_prd in ABLATION_ROWS]
