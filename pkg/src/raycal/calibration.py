"""Curriculum self-calibration: the joint photometric + PRD training loop."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from . import fileio
from .errors import NonFinite
from .field import RadianceField, SamplingSpec, photometric_loss
from .optim import BASE_LR, DECAY_STEPS, GROUP_ORDER, AdamState, Group, ParamSet, adam_step, lr_at
from .rays import group_by_pair, prd_loss
from .synth import axis_angle_deg

PHASE_GROUPS = (
    (Group.FIELD,),
    (Group.INTRINSICS, Group.EXTRINSICS),
    (Group.RADIAL,),
    (Group.RAXEL,),
)


@dataclass
class CurriculumSchedule:
    # first iteration of phases 2, 3 and 4
    boundaries: tuple = (2000, 4000, 6000)
    prd_start: int | None = None
    prd_every: int = 10
    prd_weight: float = 0.1
    eta: float = 5.0
    min_corrs: int = 8

    def __post_init__(self):
        self.boundaries = tuple(int(b) for b in self.boundaries)
        if len(self.boundaries) != 3 or any(b < 0 for b in self.boundaries):
            raise ValueError("need three non-negative phase boundaries")
        if list(self.boundaries) != sorted(self.boundaries):
            raise ValueError("phase boundaries must be nondecreasing")
        if self.prd_start is None:
            self.prd_start = self.boundaries[0]
        if self.prd_every < 1:
            raise ValueError("prd_every must be >= 1")
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if self.prd_weight < 0:
            raise ValueError("prd_weight must be non-negative")

    def phase(self, iteration):
        return 1 + sum(iteration >= b for b in self.boundaries)

    def prd_due(self, iteration):
        return iteration >= self.prd_start and iteration % self.prd_every == 0


def get_params(iteration, schedule: CurriculumSchedule):
    """Groups unlocked at ``iteration``, in canonical order."""
    if iteration < 0:
        raise ValueError("iteration must be non-negative")
    n = schedule.phase(iteration)
    return tuple(g for groups in PHASE_GROUPS[:n] for g in groups)


@dataclass
class TrainConfig:
    seed: int = 0
    iterations: int = 8000
    batch: int = 1024
    samples: int = 64
    stratified: bool = False
    schedule: CurriculumSchedule = field(default_factory=CurriculumSchedule)
    lr: dict = field(default_factory=lambda: {g: BASE_LR for g in GROUP_ORDER})
    decay_steps: float = DECAY_STEPS
    # freeze camera 0's pose to remove the global rigid gauge
    fix_gauge: bool = True
    enabled_groups: tuple = GROUP_ORDER
    use_prd: bool = True
    max_pair_angle: float = 30.0
    clamp: bool = True
    field_shape: tuple = (32, 32, 32)
    checkpoint_every: int = 0

    def __post_init__(self):
        self.lr = {Group(g): float(v) for g, v in self.lr.items()}
        for g in GROUP_ORDER:
            self.lr.setdefault(g, BASE_LR)
        self.enabled_groups = tuple(Group(g) for g in self.enabled_groups)
        if self.batch < 1 or self.iterations < 0:
            raise ValueError("batch must be positive and iterations non-negative")

    def as_dict(self):
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "schedule":
                s = self.schedule
                out.update({"phase2": s.boundaries[0], "phase3": s.boundaries[1], "phase4": s.boundaries[2],
                            "prd_start": s.prd_start, "prd_every": s.prd_every, "prd_weight": repr(s.prd_weight),
                            "eta": repr(s.eta), "min_corrs": s.min_corrs})
            elif f.name == "lr":
                out.update({f"lr_{g.value.lower()}": repr(v[g]) for g in GROUP_ORDER})
            elif f.name == "enabled_groups":
                out["groups"] = ",".join(g.value for g in v)
            elif f.name == "field_shape":
                out["field_shape"] = "x".join(str(n) for n in v)
            else:
                out[f.name] = repr(v) if isinstance(v, float) else v
        return out

    @classmethod
    def from_dict(cls, d):
        """Inverse of :meth:`as_dict`; values may be strings (config files)."""
        d = dict(d)
        kw, sched = {}, {}

        def pop(key, conv):
            if key in d:
                return conv(d.pop(key))
            return None

        def as_bool(v):
            if isinstance(v, bool):
                return v
            s = str(v).strip().lower()
            if s in ("1", "true", "yes", "on"):
                return True
            if s in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {v!r}")

        for key, conv in (("seed", int), ("iterations", int), ("batch", int), ("samples", int),
                          ("decay_steps", float), ("max_pair_angle", float), ("checkpoint_every", int)):
            v = pop(key, conv)
            if v is not None:
                kw[key] = v
        for key in ("stratified", "fix_gauge", "use_prd", "clamp"):
            v = pop(key, as_bool)
            if v is not None:
                kw[key] = v
        bounds = [pop(f"phase{i}", int) for i in (2, 3, 4)]
        if any(b is not None for b in bounds):
            default = CurriculumSchedule().boundaries
            sched["boundaries"] = tuple(default[i] if b is None else b for i, b in enumerate(bounds))
        for key, conv in (("prd_start", int), ("prd_every", int), ("prd_weight", float),
                          ("eta", float), ("min_corrs", int)):
            v = pop(key, conv)
            if v is not None:
                sched[key] = v
        lrs = {}
        for g in GROUP_ORDER:
            v = pop(f"lr_{g.value.lower()}", float)
            if v is not None:
                lrs[g] = v
        v = pop("lr", float)
        if v is not None:
            lrs = {g: lrs.get(g, v) for g in GROUP_ORDER}
        if lrs:
            kw["lr"] = lrs
        v = pop("groups", str)
        if v is not None:
            kw["enabled_groups"] = tuple(Group(s.strip().upper()) for s in v.split(",") if s.strip())
        v = pop("field_shape", str)
        if v is not None:
            kw["field_shape"] = tuple(int(n) for n in v.lower().split("x"))
        if d:
            raise KeyError(f"unknown config keys: {sorted(d)}")
        return cls(schedule=CurriculumSchedule(**sched), **kw)


@dataclass
class TrainState:
    field: RadianceField
    cameras: list
    images: np.ndarray
    corrs: list
    spec: SamplingSpec
    config: TrainConfig
    params: ParamSet = None
    adam: AdamState = None
    iteration: int = 0
    history: list = field(default_factory=list)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        if self.images.shape[0] != len(self.cameras):
            raise ValueError(f"{self.images.shape[0]} images for {len(self.cameras)} cameras")
        self._gt = torch.from_numpy(self.images)
        self.corr_index = group_by_pair(self.corrs)
        frozen = {"cam0.da", "cam0.dt"} if self.config.fix_gauge else set()
        if self.params is None:
            self.params = ParamSet.from_scene(self.field, self.cameras, frozen=frozen)
        if self.adam is None:
            self.adam = AdamState(lr=dict(self.config.lr), decay_steps=self.config.decay_steps)

    @classmethod
    def fresh(cls, images, cameras, corrs, spec, config, field=None):
        """Start from scratch: a constant field and the given (noisy) cameras."""
        if field is None:
            field = RadianceField.constant(config.field_shape)
        return cls(field, cameras, images, corrs, spec, config)

    def clamp(self):
        """Bound |df| <= 0.5 f0 and |dc| <= 0.25 min(W, H)."""
        with torch.no_grad():
            for cam in self.cameras:
                lim_f = 0.5 * cam.f0
                cam.df.copy_(torch.maximum(torch.minimum(cam.df, lim_f), -lim_f))
                cam.dc.clamp_(-0.25 * min(cam.width, cam.height), 0.25 * min(cam.width, cam.height))

    def shared(self, a, b):
        return sum(len(self.corr_index[k][0]) for k in ((a, b), (b, a)) if k in self.corr_index)


def select_pair(source, cameras, corr_index, rng, max_angle=30.0, min_shared=1):
    """Uniformly pick a target whose optical axis is within ``max_angle`` of the
    source's and which shares at least ``min_shared`` correspondences."""
    if len(cameras) < 2:
        raise ValueError("need at least two cameras")
    cands = candidates(source, cameras, corr_index, max_angle, min_shared)
    if not cands:
        return None
    return cands[int(rng.integers(len(cands)))]


def candidates(source, cameras, corr_index, max_angle=30.0, min_shared=1):
    out = []
    for j in range(len(cameras)):
        if j == source:
            continue
        shared = sum(len(corr_index[k][0]) for k in ((source, j), (j, source)) if k in corr_index)
        if shared >= min_shared and axis_angle_deg(cameras[source], cameras[j]) <= max_angle + 1e-9:
            out.append(j)
    return out


def _pixel_batch(state: TrainState, rng):
    m, h, w = state.images.shape[:3]
    img = int(rng.integers(m))
    idx = rng.integers(0, h * w, size=state.config.batch)
    ys, xs = idx // w, idx % w
    pix = torch.from_numpy(np.stack([xs + 0.5, ys + 0.5], -1).astype(np.float64))
    gt = state._gt[img, torch.from_numpy(ys), torch.from_numpy(xs)]
    return img, pix, gt


def joint_step(state: TrainState):
    """One iteration: photometric loss on a random image, plus weighted PRD when due."""
    cfg, sched = state.config, state.config.schedule
    it = state.iteration
    active = tuple(g for g in get_params(it, sched) if g in cfg.enabled_groups)
    photo_rng = np.random.default_rng([cfg.seed, it, 0])
    img, pix, gt = _pixel_batch(state, photo_rng)
    state.params.zero_grad()
    photo = photometric_loss(state.field, state.cameras[img], pix, gt, state.spec, photo_rng)
    loss = photo
    prd_val, prd_valid = math.nan, 0
    if cfg.use_prd and sched.prd_due(it):
        prd_rng = np.random.default_rng([cfg.seed, it, 1])
        src = int(prd_rng.integers(len(state.cameras)))
        tgt = select_pair(src, state.cameras, state.corr_index, prd_rng, cfg.max_pair_angle)
        if tgt is not None and state.shared(src, tgt) >= sched.min_corrs:
            subset = {k: state.corr_index[k] for k in ((src, tgt), (tgt, src)) if k in state.corr_index}
            prd, prd_valid = prd_loss(state.cameras, subset, sched.eta)
            prd_val = float(prd.detach())
            if prd_valid:
                loss = loss + sched.prd_weight * prd
    if not bool(torch.isfinite(loss)):
        raise NonFinite(f"non-finite loss at iteration {it}")
    loss.backward()
    adam_step(state.params, state.adam, active, it, clamp=state.clamp if cfg.clamp else None)
    state.history.append({
        "iter": it, "photometric": float(photo.detach()), "prd": prd_val, "prd_valid": prd_valid,
        "lr": lr_at(it, state.adam.lr[Group.FIELD], state.adam.decay_steps),
        "active_groups": "+".join(g.value for g in active),
    })
    state.iteration += 1
    return float(photo.detach()), (None if math.isnan(prd_val) else prd_val)


# checkpoints -------------------------------------------------------------

METRIC_COLUMNS = ("iter", "photometric", "prd", "prd_valid", "lr", "active_groups")


def write_metrics(path, history):
    with fileio.atomic_open(path) as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)
        for row in history:
            writer.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in METRIC_COLUMNS])


def read_metrics(path):
    rows = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rows.append({"iter": int(row["iter"]), "photometric": float(row["photometric"]),
                         "prd": float(row["prd"]), "prd_valid": int(row["prd_valid"]),
                         "lr": float(row["lr"]), "active_groups": row["active_groups"]})
    return rows


def save_checkpoint(state: TrainState, directory):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    fileio.write_field(d / "field.rfg", state.field)
    fileio.write_cameras(d / "cameras_base.txt", state.cameras)
    fileio.write_residuals(d / "residuals.txt", state.cameras)
    fileio.write_adam(d / "optimizer.adm", state.adam, state.params)
    write_metrics(d / "metrics.csv", state.history)
    # written last: its presence marks a complete checkpoint
    fileio.write_keyvalue(d / "state.txt", {"iteration": state.iteration})


def load_checkpoint(directory, images, corrs, spec, config):
    d = Path(directory)
    kv = fileio.read_keyvalue(d / "state.txt")
    cameras = fileio.read_residuals(d / "residuals.txt", fileio.read_cameras(d / "cameras_base.txt"))
    state = TrainState(fileio.read_field(d / "field.rfg"), cameras, images, corrs, spec, config)
    state.adam = fileio.read_adam(d / "optimizer.adm", state.params)
    state.iteration = int(kv["iteration"])
    state.history = read_metrics(d / "metrics.csv")
    return state


def calibrate(state: TrainState, checkpoint_dir=None, progress=None):
    """Run joint steps until ``config.iterations``; resumes from ``state.iteration``."""
    cfg = state.config
    while state.iteration < cfg.iterations:
        joint_step(state)
        if progress is not None:
            progress(state)
        if checkpoint_dir is not None and cfg.checkpoint_every and state.iteration % cfg.checkpoint_every == 0:
            save_checkpoint(state, checkpoint_dir)
    if checkpoint_dir is not None:
        save_checkpoint(state, checkpoint_dir)
    return state


def final_cameras(state: TrainState):
    return [cam.baked() for cam in state.cameras]


def has_checkpoint(directory):
    return directory is not None and (Path(directory) / "state.txt").exists()

