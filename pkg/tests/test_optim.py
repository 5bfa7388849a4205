import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from raycal.errors import NonFinite
from raycal.optim import (
    BASE_LR, GROUP_ORDER, AdamState, Group, ParamSet, adam_step, grad_check, grad_check_groups, lr_at,
)


def leaf(values):
    return torch.tensor(values, dtype=torch.float64, requires_grad=True)


def single(group=Group.FIELD, values=(3.0,)):
    ps = ParamSet()
    ps.add(group, "x", leaf(list(values)))
    return ps


class TestGradCheck:
    def test_square(self):
        ps = single()
        x = ps.groups[Group.FIELD]["x"]
        err = grad_check(lambda: (x ** 2).sum(), ps, eps=1e-5)
        assert err < 1e-9

    def test_constant(self):
        ps = single()
        x = ps.groups[Group.FIELD]["x"]
        assert grad_check(lambda: (0.0 * x).sum() + 2.0, ps) == 0.0

    def test_detects_wrong_gradient(self):
        ps = single()
        x = ps.groups[Group.FIELD]["x"]

        class Wrong(torch.autograd.Function):
            @staticmethod
            def forward(ctx, v):
                ctx.save_for_backward(v)
                return v ** 3

            @staticmethod
            def backward(ctx, g):
                (v,) = ctx.saved_tensors
                return g * 2.0 * v ** 2

        assert grad_check(lambda: Wrong.apply(x).sum(), ps) > 0.3

    def test_per_group_report(self):
        ps = ParamSet()
        a, b = leaf([1.0, 2.0]), leaf([0.5])
        ps.add(Group.FIELD, "a", a)
        ps.add(Group.RADIAL, "b", b)
        report = grad_check_groups(lambda: (a.sin() * b).sum(), ps)
        assert set(report) == {Group.FIELD, Group.RADIAL}
        assert max(report.values()) < 1e-8
        assert a.grad is None and b.grad is None

    def test_non_finite(self):
        ps = single(values=(-1.0,))
        x = ps.groups[Group.FIELD]["x"]
        with pytest.raises(NonFinite):
            grad_check(lambda: torch.sqrt(x).sum(), ps)

    def test_prd_end_to_end(self, small_scene):
        from raycal.checks import perturb, prd_closure, smooth_subset
        cams = perturb([c.clone() for c in small_scene.cameras], seed=4)
        ps = ParamSet.from_scene(None, cams)
        corrs = smooth_subset(cams, small_scene.corrs)
        assert len(corrs) > len(small_scene.corrs) // 2
        assert grad_check(prd_closure(cams, corrs), ps, eps=1e-5, per_group=8) < 1e-4


class TestParamSet:
    def test_duplicate_and_frozen_tensor(self):
        ps = single()
        with pytest.raises(ValueError):
            ps.add(Group.RAXEL, "x", leaf([1.0]))
        with pytest.raises(ValueError):
            ps.add(Group.RAXEL, "y", torch.zeros(2, dtype=torch.float64))

    def test_from_scene_partition(self, small_scene):
        cams = [c.clone() for c in small_scene.cameras]
        field = small_scene.field.clone()
        ps = ParamSet.from_scene(field, cams, frozen=("cam0.da", "cam0.dt"))
        names = [name for _, name, _ in ps.items()]
        assert len(names) == len(set(names))
        assert "cam0.da" not in names and "cam1.da" in names
        total = sum(t.numel() for _, _, t in ps.items())
        per_cam = sum(t.numel() for t in cams[0].residuals().values())
        assert total == field.params.numel() + len(cams) * per_cam - 6 - 3


class TestAdam:
    def test_unit_gradient_first_step(self):
        ps = single()
        x = ps.groups[Group.FIELD]["x"]
        x.grad = torch.ones_like(x)
        state = AdamState()
        adam_step(ps, state, {Group.FIELD})
        expected = 3.0 - BASE_LR * 1.0 / (1.0 + 1e-8)
        assert abs(float(x) - expected) < 1e-15
        assert abs(3.0 - float(x) - 0.0005) < 1e-11

    def test_hand_two_steps(self):
        ps = single(values=(0.0,))
        x = ps.groups[Group.FIELD]["x"]
        state = AdamState(lr={g: 0.1 for g in GROUP_ORDER})
        ref, m, v = 0.0, 0.0, 0.0
        for k, g in enumerate((2.0, -1.0), start=1):
            x.grad = torch.tensor([g], dtype=torch.float64)
            adam_step(ps, state, {Group.FIELD})
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            ref -= 0.1 * (m / (1 - 0.9 ** k)) / (math.sqrt(v / (1 - 0.999 ** k)) + 1e-8)
        assert abs(float(x) - ref) < 1e-15

    def test_zero_gradient_bitwise(self):
        ps = single(values=(0.1, -7.3, 1e-300))
        x = ps.groups[Group.FIELD]["x"]
        before = x.detach().clone()
        x.grad = torch.zeros_like(x)
        adam_step(ps, AdamState(), {Group.FIELD})
        assert torch.equal(x.detach(), before)

    def test_inactive_group_bitwise(self):
        ps = ParamSet()
        a, b = leaf([1.0, 2.0]), leaf([3.0])
        ps.add(Group.FIELD, "a", a)
        ps.add(Group.RAXEL, "b", b)
        a.grad, b.grad = torch.ones_like(a), torch.full_like(b, 5.0)
        state = AdamState()
        adam_step(ps, state, {Group.FIELD})
        assert float(b) == 3.0
        assert "b" not in state.m and state.steps[Group.RAXEL] == 0
        assert state.steps[Group.FIELD] == 1

    def test_nan_gradient(self):
        ps = single()
        x = ps.groups[Group.FIELD]["x"]
        x.grad = torch.tensor([math.nan], dtype=torch.float64)
        with pytest.raises(NonFinite):
            adam_step(ps, AdamState(), {Group.FIELD})
        assert float(x) == 3.0

    def test_clamp_called(self):
        ps = single()
        x = ps.groups[Group.FIELD]["x"]
        x.grad = torch.ones_like(x)

        def clamp():
            x.clamp_(max=2.0)

        adam_step(ps, AdamState(), {Group.FIELD}, clamp=clamp)
        assert float(x) == 2.0

    def test_deterministic(self):
        def run():
            torch.manual_seed(0)
            ps = single(values=tuple(np.linspace(-1, 1, 7)))
            x = ps.groups[Group.FIELD]["x"]
            state = AdamState()
            for it in range(50):
                ps.zero_grad()
                (torch.sin(3 * x) * x).sum().backward()
                adam_step(ps, state, {Group.FIELD}, iteration=it)
            return x.detach().clone()

        assert torch.equal(run(), run())


class TestSchedule:
    def test_examples(self):
        assert lr_at(0) == 0.0005
        assert abs(lr_at(400_000, decay_steps=400_000) - 0.00005) < 1e-18
        assert abs(lr_at(200_000) - 1.5811e-4) < 1e-8
        assert abs(lr_at(200_000) - 0.0005 * 10 ** -0.5) < 1e-18

    def test_negative(self):
        with pytest.raises(ValueError):
            lr_at(-1)

    @given(st.integers(0, 10 ** 7), st.integers(0, 10 ** 7))
    def test_monotone(self, a, b):
        lo, hi = min(a, b), max(a, b)
        assert lr_at(hi) <= lr_at(lo)
