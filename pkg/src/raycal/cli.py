"""Command-line entry point: ``raycal {synth,calibrate,render,eval,gradcheck}``."""

from __future__ import annotations

import argparse
import math
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import fileio
from .calibration import TrainConfig, TrainState, calibrate, final_cameras, has_checkpoint, load_checkpoint
from .checks import format_report, gradient_suite, worst
from .errors import NonFinite, ParseError
from .field import SamplingSpec, render_image
from .metrics import camera_error, psnr, ssim
from .synth import NoiseSpec, SyntheticScene, inject_noise, make_scene

SYNOPSIS = "usage: raycal {synth,calibrate,render,eval,gradcheck} [options]  (raycal <command> -h for details)"

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECK = 0, 1, 2, 3


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _threads():
    value = os.environ.get("RAYCAL_THREADS")
    if value:
        try:
            n = int(value)
        except ValueError:
            raise UsageError(f"RAYCAL_THREADS must be an integer, got {value!r}") from None
        if n < 1:
            raise UsageError("RAYCAL_THREADS must be >= 1")
        torch.set_num_threads(n)


def _scene_args(p):
    p.add_argument("--cameras", type=int, default=20)
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--height", type=int, default=32)
    p.add_argument("--blobs", type=int, default=5)
    p.add_argument("--grid", type=int, default=16)
    p.add_argument("--samples", type=int, default=32)
    p.add_argument("--corrs-per-pair", type=int, default=16)


def build_parser():
    parser = Parser(prog="raycal", description="Self-calibrating radiance-field toolkit.")
    sub = parser.add_subparsers(dest="command", parser_class=Parser)

    p = sub.add_parser("synth", help="generate a synthetic scene bundle")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _scene_args(p)
    p.add_argument("--focal-noise", type=float, default=0.0, help="percent added to every focal length")
    p.add_argument("--rot-noise", type=float, default=0.0, help="max rotation perturbation in degrees")
    p.add_argument("--trans-noise", type=float, default=0.0, help="max per-axis translation perturbation")
    p.add_argument("--noise-seed", type=int, default=1)

    p = sub.add_parser("calibrate", help="run curriculum self-calibration on a scene bundle")
    p.add_argument("--scene", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--samples", type=int)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key (repeatable)")
    p.add_argument("--resume", action="store_true", help="continue from a checkpoint in --out")
    p.add_argument("--init", choices=("auto", "gt"), default="auto",
                   help="auto: cameras_init.txt when present; gt: cameras.txt")

    p = sub.add_parser("render", help="render images from a field and cameras")
    p.add_argument("--field", required=True)
    p.add_argument("--cameras", required=True)
    p.add_argument("--residuals")
    p.add_argument("--out", required=True)
    p.add_argument("--samples", type=int, default=32)
    p.add_argument("--near", type=float)
    p.add_argument("--far", type=float)

    p = sub.add_parser("eval", help="compare estimated cameras/images against ground truth; "
                                    "writes |rendered - gt| error maps to <est>/errors when images exist")
    p.add_argument("--gt", required=True, help="scene bundle directory")
    p.add_argument("--est", required=True, help="directory with cameras.txt and optionally images/")
    p.add_argument("--skip", type=int, action="append", default=[], help="camera index left out of pose errors")

    p = sub.add_parser("gradcheck", help="finite-difference check of every gradient group")
    p.add_argument("--scene", help="scene bundle; a fresh synthetic scene when omitted")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--per-group", type=int, default=8)
    p.add_argument("--tol", type=float, default=1e-4)
    return parser


def _depth_range(field, cameras):
    centre = 0.5 * (field.lo + field.hi)
    half = 0.5 * float(torch.linalg.vector_norm(field.hi - field.lo))
    dists = [float(torch.linalg.vector_norm(c.translation.detach() - centre)) for c in cameras]
    near = max(1e-3, min(dists) - half)
    return near, max(dists) + half


def _load_scene(directory):
    d = Path(directory)
    meta = fileio.read_keyvalue(d / "meta.txt")
    cameras = fileio.read_cameras(d / "cameras.txt")
    images = fileio.read_images(d / "images", len(cameras))
    corrs = fileio.read_correspondences(d / "corrs.txt") if (d / "corrs.txt").exists() else []
    field = fileio.read_field(d / "field.rfg")
    spec = SamplingSpec(float(meta["near"]), float(meta["far"]), int(meta.get("samples", 64)))
    return SyntheticScene(field, cameras, images, corrs, spec, int(meta.get("seed", 0)), meta=meta)


def cmd_synth(args):
    scene = make_scene(seed=args.seed, n_cameras=args.cameras, resolution=(args.width, args.height),
                       n_blobs=args.blobs, grid=args.grid, samples=args.samples,
                       corrs_per_pair=args.corrs_per_pair)
    noise = NoiseSpec(args.focal_noise, args.trans_noise, args.rot_noise, args.noise_seed, keep_pose=(0,))
    noisy = any((args.focal_noise, args.trans_noise, args.rot_noise))
    scene.meta.update({"focal_noise": repr(args.focal_noise), "rot_noise": repr(args.rot_noise),
                       "trans_noise": repr(args.trans_noise), "noise_seed": args.noise_seed})
    fileio.write_scene(args.out, scene, inject_noise(scene.cameras, noise) if noisy else None)
    print(f"wrote {len(scene.cameras)} cameras, {len(scene.corrs)} correspondences to {args.out}")
    return EXIT_OK


def _config(args, defaults=None):
    values = dict(defaults or {})
    if args.config:
        values.update(fileio.read_keyvalue(args.config))
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        values[key.strip()] = value.strip()
    for key in ("seed", "iterations", "batch", "samples"):
        if getattr(args, key) is not None:
            values[key] = getattr(args, key)
    try:
        return TrainConfig.from_dict(values)
    except (KeyError, ValueError) as exc:
        raise UsageError(f"bad configuration: {exc}") from None


def cmd_calibrate(args):
    scene_dir, out = Path(args.scene), Path(args.out)
    scene = _load_scene(scene_dir)
    # sample count follows the scene unless a config or flag says otherwise
    cfg = _config(args, {"samples": scene.spec.samples})
    init_path = scene_dir / "cameras_init.txt"
    if args.init == "gt" or not init_path.exists():
        init_path = scene_dir / "cameras.txt"
    spec = SamplingSpec(scene.spec.near, scene.spec.far, cfg.samples, cfg.stratified, cfg.seed)
    out.mkdir(parents=True, exist_ok=True)
    fileio.write_keyvalue(out / "config.txt", cfg.as_dict())
    ckpt = out / "checkpoint"
    if args.resume and has_checkpoint(ckpt):
        state = load_checkpoint(ckpt, scene.images, scene.corrs, spec, cfg)
    else:
        state = TrainState.fresh(scene.images, fileio.read_cameras(init_path), scene.corrs, spec, cfg)
    calibrate(state, ckpt)
    fileio.write_cameras(out / "cameras.txt", final_cameras(state))
    last = state.history[-1] if state.history else None
    if last is not None:
        print(f"iter {last['iter']}: photometric {last['photometric']:.4e}")
    return EXIT_OK


def cmd_render(args):
    field = fileio.read_field(args.field)
    cameras = fileio.read_cameras(args.cameras)
    if args.residuals:
        fileio.read_residuals(args.residuals, cameras)
    near, far = _depth_range(field, cameras)
    near = args.near if args.near is not None else near
    far = args.far if args.far is not None else far
    spec = SamplingSpec(near, far, args.samples)
    out = Path(args.out)
    for i, cam in enumerate(cameras):
        img = render_image(field, cam, spec)
        fileio.write_ppm(out / f"{i:04d}.ppm", img)
        fileio.write_pfm(out / f"{i:04d}.pfm", img)
    print(f"rendered {len(cameras)} images to {out}")
    return EXIT_OK


def cmd_eval(args):
    gt_dir, est_dir = Path(args.gt), Path(args.est)
    gt = fileio.read_cameras(gt_dir / "cameras.txt")
    est = fileio.read_cameras(est_dir / "cameras.txt")
    err = camera_error(gt, est, skip=set(args.skip))
    print("camera  focal_pct  rotation_deg  translation")
    kept = [i for i in range(len(gt)) if i not in set(args.skip)]
    for row, i in enumerate(kept):
        print(f"{i:6d}  {err.focal_pct[row]:9.4f}  {err.rotation_deg[row]:12.6f}  {err.translation[row]:11.6f}")
    print(f"  mean  {err.mean_focal_pct:9.4f}  {err.mean_rotation_deg:12.6f}  {err.mean_translation:11.6f}")
    est_images = est_dir / "images"
    if est_images.is_dir():
        a = fileio.read_images(gt_dir / "images", len(gt))
        b = fileio.read_images(est_images, len(gt))
        ps = [psnr(x, y) for x, y in zip(b, a)]
        for i, (x, y) in enumerate(zip(b, a)):
            fileio.write_pfm(est_dir / "errors" / f"{i:04d}.pfm", np.abs(x - y))
        ss = [ssim(x, y) for x, y in zip(b, a)] if min(a.shape[1:3]) >= 11 else [math.nan]
        print(f"PSNR {np.mean(ps):.4f}  SSIM {np.mean(ss):.6f}")
    return EXIT_OK


def cmd_gradcheck(args):
    if args.scene:
        scene = _load_scene(args.scene)
    else:
        scene = make_scene(seed=args.seed, n_cameras=4, resolution=(16, 16), grid=16, samples=48,
                           corrs_per_pair=8)
    report = gradient_suite(scene, eps=args.eps, per_group=args.per_group, seed=args.seed)
    for line in format_report(report):
        print(line)
    err = worst(report)
    print(f"max relative error {err:.3e}")
    return EXIT_OK if err < args.tol else EXIT_CHECK


COMMANDS = {"synth": cmd_synth, "calibrate": cmd_calibrate, "render": cmd_render,
            "eval": cmd_eval, "gradcheck": cmd_gradcheck}


def run(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("missing command")
        _threads()
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        print(SYNOPSIS, file=sys.stderr)
        return EXIT_USAGE
    except (NonFinite, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(SYNOPSIS, file=sys.stderr)
        return EXIT_USAGE


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
