"""Parameter groups, Adam with per-group learning rates, and finite-difference checks."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import torch

from .errors import NonFinite

BASE_LR = 5e-4
DECAY_STEPS = 400_000


class Group(str, Enum):
    FIELD = "FIELD"
    INTRINSICS = "INTRINSICS"
    EXTRINSICS = "EXTRINSICS"
    RADIAL = "RADIAL"
    RAXEL = "RAXEL"


GROUP_ORDER = tuple(Group)

# which camera residual lives in which group
CAMERA_GROUPS = {"df": Group.INTRINSICS, "dc": Group.INTRINSICS, "da": Group.EXTRINSICS,
                 "dt": Group.EXTRINSICS, "zk": Group.RADIAL, "zd": Group.RAXEL, "zo": Group.RAXEL}


class ParamSet:
    """Named learnable tensors partitioned into groups, in a fixed order."""

    def __init__(self):
        self.groups = {g: {} for g in GROUP_ORDER}

    @classmethod
    def from_scene(cls, field, cameras, frozen=()):
        """Register a field and camera residuals; ``frozen`` holds names like ``cam0.da``."""
        ps = cls()
        if field is not None:
            ps.add(Group.FIELD, "field", field.params)
        for i, cam in enumerate(cameras):
            for name, tensor in cam.residuals().items():
                key = f"cam{i}.{name}"
                if key not in frozen:
                    ps.add(CAMERA_GROUPS[name], key, tensor)
        return ps

    def add(self, group, name, tensor):
        group = Group(group)
        for g in GROUP_ORDER:
            if name in self.groups[g]:
                raise ValueError(f"{name} already registered in {g.value}")
        if not tensor.requires_grad:
            raise ValueError(f"{name} is not a learnable leaf tensor")
        self.groups[group][name] = tensor

    def items(self, groups=None):
        for g in GROUP_ORDER:
            if groups is None or g in groups:
                for name, t in self.groups[g].items():
                    yield g, name, t

    def size(self, group):
        return sum(t.numel() for t in self.groups[Group(group)].values())

    def zero_grad(self):
        for _, _, t in self.items():
            t.grad = None

    def flat(self, group):
        ts = list(self.groups[Group(group)].values())
        if not ts:
            return np.zeros(0)
        return torch.cat([t.detach().reshape(-1) for t in ts]).numpy().copy()

    def snapshot(self):
        return {name: t.detach().clone() for _, name, t in self.items()}


def lr_at(iteration, base=BASE_LR, decay_steps=DECAY_STEPS):
    """Exponential decay to one tenth every ``decay_steps`` iterations."""
    if iteration < 0:
        raise ValueError("iteration must be non-negative")
    return base * 0.1 ** (iteration / decay_steps)


@dataclass
class AdamState:
    lr: dict = field(default_factory=lambda: {g: BASE_LR for g in GROUP_ORDER})
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay_steps: float = DECAY_STEPS
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    # bias correction counts only the steps a group was actually updated
    steps: dict = field(default_factory=lambda: {g: 0 for g in GROUP_ORDER})

    def moments(self, name, tensor):
        if name not in self.m:
            self.m[name] = torch.zeros_like(tensor, requires_grad=False)
            self.v[name] = torch.zeros_like(tensor, requires_grad=False)
        return self.m[name], self.v[name]


def adam_step(params: ParamSet, state: AdamState, active, iteration=0, clamp=None):
    """Update every tensor of the ``active`` groups in place from its ``.grad``.

    Inactive groups are skipped outright: values, moments and step counts
    stay bitwise unchanged. ``clamp`` runs afterwards under no_grad.
    """
    active = {Group(g) for g in active}
    with torch.no_grad():
        for g in GROUP_ORDER:
            if g not in active or not params.groups[g]:
                continue
            for name, t in params.groups[g].items():
                if t.grad is not None and not bool(torch.isfinite(t.grad).all()):
                    raise NonFinite(f"non-finite gradient for {name} at iteration {iteration}")
            state.steps[g] += 1
            k = state.steps[g]
            lr = lr_at(iteration, state.lr[g], state.decay_steps)
            c1 = 1.0 - state.beta1 ** k
            c2 = 1.0 - state.beta2 ** k
            for name, t in params.groups[g].items():
                grad = t.grad if t.grad is not None else torch.zeros_like(t)
                m, v = state.moments(name, t)
                m.mul_(state.beta1).add_(grad, alpha=1.0 - state.beta1)
                v.mul_(state.beta2).addcmul_(grad, grad, value=1.0 - state.beta2)
                t.sub_(lr * (m / c1) / (torch.sqrt(v / c2) + state.eps))
        if clamp is not None:
            clamp()


def _flat_index(tensors, index):
    for name, t in tensors:
        if index < t.numel():
            return name, t, index
        index -= t.numel()
    raise IndexError(index)


def grad_check_groups(fn, params: ParamSet, eps=1e-5, per_group=8, groups=None, seed=0, floor=1e-12):
    """Compare autograd partials of scalar ``fn()`` with central differences.

    At most ``per_group`` scalars are checked per group: half with the largest
    recorded partial, the rest drawn at random among entries whose partial is
    at least ``1e-3`` of the group maximum (smaller ones sit below the
    difference quotient's roundoff). Returns {group: max rel err}.
    """
    params.zero_grad()
    value = fn()
    if not bool(torch.isfinite(value)):
        raise NonFinite("function value is not finite")
    value.backward()
    rng = np.random.default_rng(seed)
    report = {}
    for g in GROUP_ORDER:
        if groups is not None and g not in groups:
            continue
        tensors = list(params.groups[g].items())
        if not tensors:
            continue
        grads = torch.cat([(t.grad if t.grad is not None else torch.zeros_like(t)).reshape(-1)
                           for _, t in tensors]).numpy().copy()
        n = grads.size
        if per_group is None or n <= per_group:
            picks = np.arange(n)
        else:
            top = np.argsort(-np.abs(grads), kind="stable")[: per_group // 2]
            big = np.flatnonzero(np.abs(grads) >= 1e-3 * np.abs(grads).max())
            rest = np.setdiff1d(big, top)
            k = min(per_group - top.size, rest.size)
            picks = np.concatenate([top, rng.choice(rest, k, replace=False)]) if k else top
        worst = 0.0
        for idx in picks:
            _, t, local = _flat_index(tensors, int(idx))
            flat = t.data.view(-1)
            orig = flat[local].item()
            with torch.no_grad():
                flat[local] = orig + eps
                fp = float(fn())
                flat[local] = orig - eps
                fm = float(fn())
                flat[local] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NonFinite(f"non-finite evaluation while perturbing {g.value}[{idx}]")
            fd = (fp - fm) / (2.0 * eps)
            a = float(grads[idx])
            err = abs(a - fd) / max(abs(a), abs(fd), floor)
            worst = max(worst, err)
        report[g] = worst
    params.zero_grad()
    return report


def grad_check(fn, params: ParamSet, eps=1e-5, **kw):
    report = grad_check_groups(fn, params, eps, **kw)
    return max(report.values(), default=0.0)
