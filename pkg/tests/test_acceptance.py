"""End-to-end acceptance criteria A1-A8.

Each test records one PASS/FAIL line, printed in the pytest terminal summary
(and to stdout with ``-s``).
"""

import contextlib
import filecmp
import math
import time

import numpy as np
import pytest
import torch
from scipy.optimize import brentq

from conftest import ACCEPTANCE_LINES
from oracles import brute_force_distance
from raycal import fileio
from raycal.calibration import CurriculumSchedule, TrainConfig, TrainState, calibrate, joint_step
from raycal.camera import CameraParams, Ray, apply_radial, project, rotation_from_6vec, unproject
from raycal.checks import perturb, photometric_closure, prd_closure, smooth_subset
from raycal.cli import run as cli
from raycal.experiments import RECOVERY_TARGETS, ExperimentConfig, run_ablation, run_recovery
from raycal.field import SamplingSpec, render_ray
from raycal.optim import CAMERA_GROUPS, Group, ParamSet, grad_check
from raycal.rays import Correspondence, closest_points, prd_loss, prd_terms, projected_ray_distance
from raycal.synth import AnalyticField, NoiseSpec, inject_noise, make_scene

pytestmark = pytest.mark.acceptance


class Criterion:
    def __init__(self, name):
        self.name, self.ok, self.detail = name, False, ""
        self.start = time.perf_counter()

    @property
    def elapsed(self):
        return time.perf_counter() - self.start


@contextlib.contextmanager
def criterion(name):
    c = Criterion(name)
    try:
        yield c
    except Exception as exc:
        c.ok, c.detail = False, f"{type(exc).__name__}: {exc}"
        raise
    finally:
        line = f"{c.name} {'PASS' if c.ok else 'FAIL'}  {c.detail}  [{c.elapsed:.1f} s]"
        ACCEPTANCE_LINES.append(line)
        print(line)
    assert c.ok, line


# A1 ----------------------------------------------------------------------

RESIDUALS = ("df", "dc", "da", "dt", "zk", "zd", "zo")


def per_parameter(closure, cameras, field=None, eps=1e-5):
    out = {}
    for kind in RESIDUALS + (("field",) if field is not None else ()):
        ps = ParamSet()
        if kind == "field":
            ps.add(Group.FIELD, "field", field.params)
        else:
            for i, cam in enumerate(cameras):
                ps.add(CAMERA_GROUPS[kind], f"cam{i}.{kind}", cam.residuals()[kind])
        out[kind] = grad_check(closure, ps, eps=eps, per_group=8)
    return out


def test_a1_gradient_integrity():
    with criterion("A1 gradient integrity") as c:
        scene = make_scene(seed=0, n_cameras=4, resolution=(16, 16), grid=16, samples=48, corrs_per_pair=8)
        cams = perturb([cam.clone() for cam in scene.cameras], seed=0)
        field = scene.field.clone()
        spec = SamplingSpec(scene.spec.near, scene.spec.far, 48)
        photo = per_parameter(photometric_closure(field, cams, scene.images, spec, image=2), cams, field)
        corrs = smooth_subset(cams, scene.corrs)
        prd = per_parameter(prd_closure(cams, corrs), cams)
        worst = max(max(photo.values()), max(prd.values()))
        parts = " ".join(f"{k}={max(photo[k], prd.get(k, 0.0)):.1e}" for k in photo)
        c.detail = f"max rel err {worst:.2e} (< 1e-4) [{parts}] over {len(corrs)} PRD corrs"
        c.ok = worst < 1e-4 and c.elapsed < 60


# A2 ----------------------------------------------------------------------

def test_a2_geometric_oracles():
    with criterion("A2 geometric oracles") as c:
        rng = np.random.default_rng(0)
        oa, da, ob, db = (rng.normal(size=(3000, 3)) for _ in range(4))
        pair = closest_points(Ray(torch.from_numpy(oa), torch.from_numpy(da)),
                              Ray(torch.from_numpy(ob), torch.from_numpy(db)))
        # brute force searches |s|, |t| <= 100; keep pairs whose minimiser lies well inside
        inside = ((pair.t_hat_a.abs() < 90) & (pair.t_hat_b.abs() < 90)).numpy()
        keep = np.flatnonzero(inside)[:1000]
        closed = torch.linalg.vector_norm(pair.x_a - pair.x_b, dim=-1).numpy()[keep]
        brute = brute_force_distance(oa[keep], da[keep], ob[keep], db[keep])
        dist_err = float(np.abs(closed - brute).max())

        a6 = torch.from_numpy(rng.normal(size=(1000, 6)))
        R = torch.stack([rotation_from_6vec(a) for a in a6]).numpy()
        ortho = float(np.abs(np.einsum("nji,njk->nik", R, R) - np.eye(3)).max())
        det = float(np.abs(np.linalg.det(R) - 1.0).max())

        p = torch.from_numpy(rng.uniform(0, 64, size=(1000, 2)))
        c0 = torch.tensor([31.7, 30.2], dtype=torch.float64)
        radial_exact = torch.equal(apply_radial(p, c0, torch.zeros(2, dtype=torch.float64))[:, :2], p)
        cam = CameraParams.create(64, 64, 50.0, [31.7, 30.2])
        x = torch.from_numpy(rng.normal(size=(200, 3)) * 0.3 + [0, 0, 4])
        pin = (x[:, :2] / x[:, 2:] * 50.0 + c0).numpy()
        proj_exact = float(np.abs(project(cam, x).detach().numpy() - pin).max())

        c.detail = (f"{keep.size} pairs dist err {dist_err:.1e}; 6vec ortho {ortho:.1e} det {det:.1e}; "
                    f"k=0 identity {'exact' if radial_exact else 'inexact'} (proj {proj_exact:.1e})")
        c.ok = (keep.size == 1000 and dist_err < 1e-6 and ortho < 1e-12 and det < 1e-12 and radial_exact
                and proj_exact < 1e-12 and c.elapsed < 10)


# A3 ----------------------------------------------------------------------

def random_rays(rng, n, radius=4.0, spread=0.6):
    """Unit-direction rays from a sphere of radius 4 aimed into the field."""
    origin = rng.normal(size=(n, 3))
    origin = radius * origin / np.linalg.norm(origin, axis=1, keepdims=True)
    d = rng.uniform(-spread, spread, size=(n, 3)) - origin
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return Ray(torch.from_numpy(origin), torch.from_numpy(d))


def test_a3_rendering_oracle():
    with criterion("A3 rendering oracle") as c:
        scene = make_scene(seed=0, n_cameras=2, resolution=(8, 8), grid=8, samples=8, corrs_per_pair=0)
        field = AnalyticField(scene.blobs)
        rng = np.random.default_rng(0)
        rays = random_rays(rng, 100)
        near, far = 4.0 - math.sqrt(3.0), 4.0 + math.sqrt(3.0)
        coarse = render_ray(field, rays, SamplingSpec(near, far, 64))
        fine = render_ray(field, rays, SamplingSpec(near, far, 8192))
        quad_err = float((coarse - fine).abs().max())

        lo, hi = math.inf, -math.inf
        for scale in (0.0, 1e-3, 1.0, 1e3, 1e6):
            boosted = AnalyticField([type(b)(b.center, b.width, b.amplitude * scale, b.color) for b in scene.blobs])
            for samples in (2, 64, 1024):
                _, w = render_ray(boosted, rays, SamplingSpec(near, far, samples), return_weights=True)
                lo, hi = min(lo, float(w.min())), max(hi, float(w.sum(-1).max()))
        c.detail = f"N=64 vs 8192 max channel err {quad_err:.2e} (< 1e-3); weights min {lo:.1e}, max sum {hi:.6f}"
        c.ok = quad_err < 1e-3 and lo >= 0.0 and hi <= 1.0 and c.elapsed < 30


# A4 / A7 ------------------------------------------------------------------

@pytest.fixture(scope="module")
def experiment():
    cfg = ExperimentConfig()
    return cfg, cfg.scene()


def test_a4_self_calibration_recovery(experiment):
    with criterion("A4 self-calibration recovery") as c:
        cfg, scene = experiment
        parts, ok = [], True
        for kind, (attr, target) in RECOVERY_TARGETS.items():
            res = run_recovery(kind, cfg, scene)
            value = getattr(res, attr)
            ok &= value < target and res.prd < 0.5
            parts.append(f"{kind}: {attr} {value:.4g} (< {target}) prd {res.prd:.3f}")
        c.detail = "; ".join(parts) + f"; {cfg.iterations} iters each"
        c.ok = ok and c.elapsed < 600


def test_a7_ablation_direction(experiment):
    with criterion("A7 ablation direction") as c:
        cfg, scene = experiment
        rows = run_ablation(cfg, scene)
        p = [r.psnr for r in rows]
        order = p[0] < p[1] < p[2] <= p[3]
        prd_best = min(rows, key=lambda r: r.prd) is rows[-1]
        c.detail = "; ".join(f"{r.label} psnr {r.psnr:.3f} prd {r.prd:.4f}" for r in rows)
        c.ok = order and prd_best


# A5 ----------------------------------------------------------------------

def shift_to_distance(a, b, corr, target):
    """Move p_b vertically until the projected ray distance equals ``target``."""
    def f(s):
        d, ok = prd_terms(a, b, [corr.p_a], [[corr.p_b[0], corr.p_b[1] + s]])
        return float(d[0]) - target if bool(ok[0]) else math.nan

    for bound in (b.height - 0.5 - corr.p_b[1], 0.5 - corr.p_b[1]):
        if f(bound) > 0:
            s = brentq(f, 0.0, bound, xtol=1e-13)
            return Correspondence(corr.cam_a, corr.cam_b, corr.p_a, (corr.p_b[0], corr.p_b[1] + s))
    return None


def test_a5_prd_fixed_point():
    with criterion("A5 PRD fixed point") as c:
        scene = make_scene(seed=0, n_cameras=6, resolution=(32, 32), grid=16, samples=32, corrs_per_pair=12)
        with torch.no_grad():
            gt_loss, count = prd_loss(scene.cameras, scene.corrs)

        # two parallel cameras, rays pointing apart: closest points are behind both
        a = CameraParams.create(64, 64, 60.0, [32.0, 32.0])
        b = CameraParams.create(64, 64, 60.0, [32.0, 32.0], translation=[1.0, 0.0, 0.0])
        behind = [Correspondence(0, 1, (2.0 + k, 32.0 + k), (62.0 - k, 32.0 + k)) for k in range(8)]
        skipped = all(projected_ray_distance(a, b, corr) is None for corr in behind)
        with torch.no_grad():
            pair = closest_points(unproject(a, torch.tensor([behind[0].p_a])), unproject(b, torch.tensor([behind[0].p_b])))
        depth = float(pair.x_a[0, 2])

        cams = scene.cameras
        base = next(corr for corr in scene.corrs if (corr.cam_a, corr.cam_b) == (0, 1))
        above = shift_to_distance(cams[0], cams[1], base, 6.0)
        below = shift_to_distance(cams[0], cams[1], base, 4.0)
        with torch.no_grad():
            loss, n = prd_loss(cams, [above, below])
        excluded = projected_ray_distance(cams[0], cams[1], above, eta=5.0) is None and n == 1

        c.detail = (f"GT prd {float(gt_loss):.2e} over {count} corrs (< 1e-8); behind-camera skipped {skipped} "
                    f"(closest point z {depth:.2f}); d=6 pair excluded {excluded}, kept d=4 -> {float(loss):.6f}")
        c.ok = (float(gt_loss) < 1e-8 and count == len(scene.corrs) and skipped and depth < 0 and excluded
                and abs(float(loss) - 4.0) < 1e-9)


# A6 ----------------------------------------------------------------------

def small_training(scene, **kw):
    args = dict(seed=0, iterations=16, batch=64, samples=24, field_shape=(8, 8, 8),
                schedule=CurriculumSchedule(boundaries=(4, 8, 12), prd_every=2))
    args.update(kw)
    cfg = TrainConfig(**args)
    cams = inject_noise(scene.cameras, NoiseSpec(5.0, 0.01, 1.0, seed=2, keep_pose=(0,)))
    spec = SamplingSpec(scene.spec.near, scene.spec.far, cfg.samples)
    return TrainState.fresh(scene.images, cams, scene.corrs, spec, cfg)


def test_a6_curriculum_gating(small_scene):
    with criterion("A6 curriculum gating") as c:
        state = small_training(small_scene)
        snaps = [state.params.snapshot()]
        while state.iteration < state.config.iterations:
            joint_step(state)
            snaps.append(state.params.snapshot())
        starts = {Group.FIELD: 0, Group.INTRINSICS: 4, Group.EXTRINSICS: 4, Group.RADIAL: 8, Group.RAXEL: 12}
        frozen_ok, moved_ok = True, True
        for g, start in starts.items():
            names = list(state.params.groups[g])
            frozen_ok &= all(torch.equal(snaps[k][n], snaps[0][n]) for k in range(start + 1) for n in names)
            moved_ok &= any(not torch.equal(snaps[start + 1][n], snaps[start][n]) for n in names)

        sched = dict(boundaries=(2, 6, 10), prd_every=2)
        zero = small_training(small_scene, schedule=CurriculumSchedule(**sched, prd_weight=0.0))
        off = small_training(small_scene, schedule=CurriculumSchedule(**sched), use_prd=False)
        calibrate(zero)
        calibrate(off)
        same = all(n == m and torch.equal(ta, tb) for (_, n, ta), (_, m, tb) in zip(zero.params.items(),
                                                                                  off.params.items()))
        same &= [h["photometric"] for h in zero.history] == [h["photometric"] for h in off.history]
        prd_ran = sum(h["prd_valid"] > 0 for h in zero.history)
        c.detail = (f"groups frozen before boundary {frozen_ok}, move at boundary {moved_ok}; "
                    f"lambda=0 vs PRD off bitwise {same} ({prd_ran} PRD evaluations)")
        c.ok = frozen_ok and moved_ok and same and prd_ran > 0


# A8 ----------------------------------------------------------------------

def same_tree(a, b):
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only or cmp.funny_files:
        return False
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    return not mismatch and not errors and all(same_tree(a / d, b / d) for d in cmp.common_dirs)


def roundtrips(tmp, rng, scene):
    out = {}
    cams = perturb([cam.clone() for cam in scene.cameras], seed=5)
    fileio.write_cameras(tmp / "c.txt", cams)
    back = fileio.read_cameras(tmp / "c.txt")
    out["cameras"] = all(torch.equal(getattr(x, k), getattr(y, k)) for x, y in zip(scene.cameras, back)
                         for k in ("f0", "c0", "k0", "a0", "t0", "zd0", "zo0"))
    fileio.write_residuals(tmp / "r.txt", cams)
    fresh = fileio.read_residuals(tmp / "r.txt", [cam.clone() for cam in scene.cameras])
    out["residuals"] = all(torch.equal(t, y.residuals()[k]) for x, y in zip(cams, fresh)
                           for k, t in x.residuals().items())
    fileio.write_correspondences(tmp / "k.txt", scene.corrs)
    out["corrs"] = fileio.read_correspondences(tmp / "k.txt") == scene.corrs
    fileio.write_field(tmp / "f.rfg", scene.field)
    out["field"] = torch.equal(fileio.read_field(tmp / "f.rfg").params, scene.field.params.detach())
    img = rng.random((9, 7, 3)).astype(np.float32)
    fileio.write_pfm(tmp / "i.pfm", img)
    out["pfm"] = np.array_equal(fileio.read_pfm(tmp / "i.pfm"), img)
    q = np.round(rng.random((9, 7, 3)) * 255) / 255
    fileio.write_ppm(tmp / "i.ppm", q)
    out["ppm"] = np.array_equal(fileio.read_ppm(tmp / "i.ppm"), q)
    kv = {"lr": repr(0.1 + 0.2), "n": "3"}
    fileio.write_keyvalue(tmp / "kv.txt", kv)
    out["keyvalue"] = fileio.read_keyvalue(tmp / "kv.txt") == kv
    return out


def test_a8_determinism_and_io(tmp_path, small_scene):
    with criterion("A8 determinism and IO") as c:
        synth = ["--seed", "4", "--cameras", "3", "--width", "12", "--height", "12", "--grid", "8",
                 "--samples", "16", "--corrs-per-pair", "8", "--focal-noise", "5", "--rot-noise", "1"]
        cal = ["--iterations", "10", "--batch", "32", "--set", "phase2=3", "--set", "phase3=6",
               "--set", "phase4=8", "--set", "prd_every=2", "--set", "field_shape=6x6x6"]
        codes = []
        for run_dir in ("a", "b"):
            d = tmp_path / run_dir
            codes.append(cli(["synth", "--out", str(d / "scene")] + synth))
            codes.append(cli(["calibrate", "--scene", str(d / "scene"), "--out", str(d / "cal")] + cal))
            codes.append(cli(["render", "--field", str(d / "cal" / "checkpoint" / "field.rfg"), "--cameras",
                              str(d / "cal" / "cameras.txt"), "--out", str(d / "cal" / "images"),
                              "--samples", "16"]))
        reproduced = same_tree(tmp_path / "a", tmp_path / "b")
        (tmp_path / "io").mkdir()
        io = roundtrips(tmp_path / "io", np.random.default_rng(0), small_scene)
        failed = [k for k, ok in io.items() if not ok]
        c.detail = (f"synth/calibrate/render re-run bitwise {reproduced} (exit codes {codes}); "
                    f"round-trips {len(io) - len(failed)}/{len(io)} exact" + (f", failed {failed}" if failed else ""))
        c.ok = reproduced and set(codes) == {0} and not failed
