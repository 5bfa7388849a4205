"""Readers and writers for every on-disk artifact.

Text formats write floats with ``repr`` so a write/read cycle is value-exact.
Binary formats are little-endian. Every writer goes through a temporary file
and an atomic rename.
"""

from __future__ import annotations

import io
import math
import os
import struct
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import torch

from .camera import DTYPE, CameraParams
from .errors import ParseError
from .field import RadianceField
from .optim import GROUP_ORDER, AdamState, Group, ParamSet
from .rays import Correspondence


@contextmanager
def atomic_open(path, mode="w"):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, mode) as fh:
            yield fh
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise


def _fmt(values):
    return " ".join(repr(float(v)) for v in values)


def _floats(tokens, path, line, count=None):
    if count is not None and len(tokens) != count:
        raise ParseError(f"expected {count} numbers, got {len(tokens)}", path, line)
    try:
        vals = [float(t) for t in tokens]
    except ValueError as exc:
        raise ParseError(str(exc), path, line) from None
    if not all(math.isfinite(v) for v in vals):
        raise ParseError("non-finite value", path, line)
    return vals


def _ints(tokens, path, line, count):
    if len(tokens) != count:
        raise ParseError(f"expected {count} integers, got {len(tokens)}", path, line)
    try:
        return [int(t) for t in tokens]
    except ValueError as exc:
        raise ParseError(str(exc), path, line) from None


def _blocks(path):
    """Split a text file into blank-line separated blocks of (line no, tokens)."""
    blocks, cur = [], []
    with open(path) as fh:
        for no, raw in enumerate(fh, 1):
            text = raw.split("#", 1)[0].strip()
            if not text:
                if cur:
                    blocks.append(cur)
                    cur = []
                continue
            cur.append((no, text.split()))
    if cur:
        blocks.append(cur)
    return blocks


# cameras ---------------------------------------------------------------

_CAMERA_KEYS = (("f", "f0", 2), ("c", "c0", 2), ("k", "k0", 2), ("a", "a0", 6), ("t", "t0", 3))
_RESIDUAL_KEYS = (("df", "df", 2), ("dc", "dc", 2), ("dk", "zk", 2), ("da", "da", 6), ("dt", "dt", 3))


def _raxel_lines(zd, zo):
    gh, gw = zd.shape[:2]
    yield f"{gw} {gh}"
    for row in torch.cat([zd, zo], -1).reshape(-1, 6).tolist():
        yield _fmt(row)


def write_cameras(path, cameras):
    with atomic_open(path) as fh:
        for i, cam in enumerate(cameras):
            if i:
                fh.write("\n")
            fh.write(f"{cam.width} {cam.height}\n")
            for key, attr, _ in _CAMERA_KEYS:
                fh.write(f"{key} {_fmt(getattr(cam, attr).tolist())}\n")
            lines = _raxel_lines(cam.zd0, cam.zo0)
            fh.write(f"raxel {next(lines)}\n")
            fh.writelines(line + "\n" for line in lines)


def write_residuals(path, cameras):
    with atomic_open(path) as fh, torch.no_grad():
        for i, cam in enumerate(cameras):
            if i:
                fh.write("\n")
            for key, attr, _ in _RESIDUAL_KEYS:
                fh.write(f"{key} {_fmt(getattr(cam, attr).tolist())}\n")
            lines = _raxel_lines(cam.zd, cam.zo)
            fh.write(f"draxel {next(lines)}\n")
            fh.writelines(line + "\n" for line in lines)


def _read_raxel(lines, pos, tokens, path, line):
    gw, gh = _ints(tokens, path, line, 2)
    if gw < 2 or gh < 2:
        raise ParseError("raxel grid must be at least 2x2", path, line)
    rows = lines[pos:pos + gw * gh]
    if len(rows) != gw * gh:
        raise ParseError(f"expected {gw * gh} raxel rows", path, line)
    vals = torch.tensor([_floats(toks, path, no, 6) for no, toks in rows], dtype=DTYPE)
    vals = vals.reshape(gh, gw, 6)
    return vals[..., :3].clone(), vals[..., 3:].clone(), pos + gw * gh


def read_cameras(path):
    cams = []
    for block in _blocks(path):
        no, toks = block[0]
        width, height = _ints(toks, path, no, 2)
        fields, raxel = {}, None
        pos = 1
        while pos < len(block):
            no, toks = block[pos]
            key = toks[0]
            pos += 1
            spec = {k: (a, n) for k, a, n in _CAMERA_KEYS}
            if key in spec:
                attr, n = spec[key]
                fields[attr] = _floats(toks[1:], path, no, n)
            elif key == "raxel":
                zd, zo, pos = _read_raxel(block, pos, toks[1:], path, no)
                raxel = (zd, zo)
            else:
                raise ParseError(f"unknown camera key {key!r}", path, no)
        missing = [a for _, a, _ in _CAMERA_KEYS if a not in fields]
        if missing:
            raise ParseError(f"camera block missing {missing}", path, block[0][0])
        cam = CameraParams.create(width, height, fields["f0"], fields["c0"], translation=fields["t0"],
                                  radial=fields["k0"], a6=fields["a0"])
        if raxel is not None:
            cam = CameraParams(width, height, cam.f0, cam.c0, cam.k0, cam.a0, cam.t0, *raxel)
        cams.append(cam)
    return cams


def read_residuals(path, cameras):
    """Load residuals in place into ``cameras`` (which fixes the count and grid sizes)."""
    blocks = _blocks(path)
    if len(blocks) != len(cameras):
        raise ParseError(f"{len(blocks)} residual blocks for {len(cameras)} cameras", path)
    spec = {k: (a, n) for k, a, n in _RESIDUAL_KEYS}
    with torch.no_grad():
        for cam, block in zip(cameras, blocks):
            pos = 0
            while pos < len(block):
                no, toks = block[pos]
                pos += 1
                if toks[0] in spec:
                    attr, n = spec[toks[0]]
                    getattr(cam, attr).copy_(torch.tensor(_floats(toks[1:], path, no, n), dtype=DTYPE))
                elif toks[0] == "draxel":
                    zd, zo, pos = _read_raxel(block, pos, toks[1:], path, no)
                    if zd.shape != cam.zd.shape:
                        raise ParseError(f"raxel grid {tuple(zd.shape)} does not match camera", path, no)
                    cam.zd.copy_(zd)
                    cam.zo.copy_(zo)
                else:
                    raise ParseError(f"unknown residual key {toks[0]!r}", path, no)
    return cameras


# correspondences -------------------------------------------------------

def write_correspondences(path, corrs):
    with atomic_open(path) as fh:
        fh.write("# camA camB xA yA xB yB\n")
        for c in corrs:
            fh.write(f"{c.cam_a} {c.cam_b} {_fmt(c.p_a)} {_fmt(c.p_b)}\n")


def read_correspondences(path):
    out = []
    with open(path) as fh:
        for no, raw in enumerate(fh, 1):
            text = raw.strip()
            if not text or text.startswith("#"):
                continue
            toks = text.split()
            if len(toks) != 6:
                raise ParseError(f"expected 6 fields, got {len(toks)}", path, no)
            a, b = _ints(toks[:2], path, no, 2)
            xa, ya, xb, yb = _floats(toks[2:], path, no, 4)
            try:
                out.append(Correspondence(a, b, (xa, ya), (xb, yb)))
            except ValueError as exc:
                raise ParseError(str(exc), path, no) from None
    return out


# radiance field checkpoint ---------------------------------------------

FIELD_MAGIC = b"RFG1"


def write_field(path, field):
    nx, ny, nz = field.shape
    body = field.params.detach().permute(1, 2, 3, 0).contiguous().numpy().astype("<f8")
    with atomic_open(path, "wb") as fh:
        fh.write(FIELD_MAGIC)
        fh.write(struct.pack("<3I", nx, ny, nz))
        fh.write(struct.pack("<6d", *field.lo.tolist(), *field.hi.tolist()))
        fh.write(body.tobytes())


def read_field(path):
    data = Path(path).read_bytes()
    if data[:4] != FIELD_MAGIC:
        raise ParseError("bad magic, expected RFG1", path, offset=0)
    if len(data) < 64:
        raise ParseError("truncated header", path, offset=len(data))
    nx, ny, nz = struct.unpack_from("<3I", data, 4)
    bounds = struct.unpack_from("<6d", data, 16)
    count = nx * ny * nz * 4
    if len(data) != 64 + 8 * count:
        raise ParseError(f"expected {64 + 8 * count} bytes, got {len(data)}", path, offset=64)
    vals = np.frombuffer(data, dtype="<f8", count=count, offset=64)
    if not np.isfinite(vals).all() or not all(map(math.isfinite, bounds)):
        bad = int(np.flatnonzero(~np.isfinite(vals))[0]) if not np.isfinite(vals).all() else 0
        raise ParseError("non-finite value", path, offset=64 + 8 * bad)
    params = torch.from_numpy(vals.astype(np.float64).reshape(nz, ny, nx, 4)).permute(3, 0, 1, 2)
    return RadianceField(params.contiguous(), bounds[:3], bounds[3:])


# images ----------------------------------------------------------------

def quantize8(img):
    return np.round(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(path, img):
    q = quantize8(img)
    h, w = q.shape[:2]
    with atomic_open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(q.tobytes())


def _header_tokens(data, n):
    """Read ``n`` whitespace-separated header tokens; returns (tokens, body offset)."""
    toks, pos = [], 0
    while len(toks) < n:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            break
        toks.append(data[start:pos].decode("ascii", "replace"))
    return toks, pos + 1


def read_ppm(path):
    data = Path(path).read_bytes()
    toks, off = _header_tokens(data, 4)
    if len(toks) < 4 or toks[0] != "P6":
        raise ParseError("not a binary P6 PPM", path, offset=0)
    try:
        w, h, maxval = int(toks[1]), int(toks[2]), int(toks[3])
    except ValueError:
        raise ParseError("bad PPM header", path, offset=0) from None
    if maxval != 255:
        raise ParseError(f"unsupported maxval {maxval}", path, offset=off)
    if len(data) - off != w * h * 3:
        raise ParseError(f"expected {w * h * 3} pixel bytes, got {len(data) - off}", path, offset=off)
    q = np.frombuffer(data, dtype=np.uint8, offset=off).reshape(h, w, 3)
    return q.astype(np.float64) / 255.0


def write_pfm(path, img):
    """Little-endian colour PFM; values are stored as float32, bottom row first."""
    img = np.asarray(img)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=-1)
    h, w = img.shape[:2]
    body = np.ascontiguousarray(np.flipud(img).astype("<f4"))
    with atomic_open(path, "wb") as fh:
        fh.write(f"PF\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(body.tobytes())


def read_pfm(path, clamp=False):
    data = Path(path).read_bytes()
    toks, off = _header_tokens(data, 4)
    if len(toks) < 4 or toks[0] not in ("PF", "Pf"):
        raise ParseError("not a PFM file", path, offset=0)
    chans = 3 if toks[0] == "PF" else 1
    try:
        w, h, scale = int(toks[1]), int(toks[2]), float(toks[3])
    except ValueError:
        raise ParseError("bad PFM header", path, offset=0) from None
    dtype = "<f4" if scale < 0 else ">f4"
    n = w * h * chans
    if len(data) - off != 4 * n:
        raise ParseError(f"expected {4 * n} bytes of samples, got {len(data) - off}", path, offset=off)
    vals = np.frombuffer(data, dtype=dtype, offset=off).astype(np.float32)
    if not np.isfinite(vals).all():
        bad = int(np.flatnonzero(~np.isfinite(vals))[0])
        raise ParseError("non-finite sample", path, offset=off + 4 * bad)
    img = np.flipud(vals.reshape(h, w, chans))
    if chans == 1:
        img = img[..., 0]
    img = np.ascontiguousarray(img)
    return np.clip(img, 0.0, 1.0) if clamp else img


def read_image(path):
    """Load an image as float64 in [0, 1] from PFM or PPM."""
    path = Path(path)
    if path.suffix == ".pfm":
        return read_pfm(path, clamp=True).astype(np.float64)
    return read_ppm(path)


# optimizer state -------------------------------------------------------

ADAM_MAGIC = b"ADM1"


def write_adam(path, state: AdamState, params: ParamSet):
    buf = io.BytesIO()
    buf.write(ADAM_MAGIC)
    buf.write(struct.pack("<4d", state.beta1, state.beta2, state.eps, float(state.decay_steps)))
    buf.write(struct.pack("<I", len(GROUP_ORDER)))
    for g in GROUP_ORDER:
        name = g.value.encode("ascii")
        tensors = params.groups[g]
        buf.write(struct.pack("<I", len(name)) + name)
        buf.write(struct.pack("<dQI", state.lr[g], state.steps[g], len(tensors)))
        for pname, t in tensors.items():
            m, v = state.moments(pname, t)
            raw = pname.encode("utf-8")
            buf.write(struct.pack("<IQ", len(raw), t.numel()) + raw)
            buf.write(m.reshape(-1).numpy().astype("<f8").tobytes())
            buf.write(v.reshape(-1).numpy().astype("<f8").tobytes())
    with atomic_open(path, "wb") as fh:
        fh.write(buf.getvalue())


def read_adam(path, params: ParamSet) -> AdamState:
    data = Path(path).read_bytes()
    if data[:4] != ADAM_MAGIC:
        raise ParseError("bad magic, expected ADM1", path, offset=0)
    try:
        off = 4
        b1, b2, eps, decay = struct.unpack_from("<4d", data, off)
        off += 32
        (ngroups,) = struct.unpack_from("<I", data, off)
        off += 4
        state = AdamState(beta1=b1, beta2=b2, eps=eps, decay_steps=decay)
        for _ in range(ngroups):
            (n,) = struct.unpack_from("<I", data, off)
            off += 4
            group = Group(data[off:off + n].decode("ascii"))
            off += n
            lr, steps, count = struct.unpack_from("<dQI", data, off)
            off += 20
            state.lr[group], state.steps[group] = lr, steps
            for _ in range(count):
                n, size = struct.unpack_from("<IQ", data, off)
                off += 12
                pname = data[off:off + n].decode("utf-8")
                off += n
                tensor = params.groups[group].get(pname)
                if tensor is None or tensor.numel() != size:
                    raise ParseError(f"moment vector {pname!r} does not match the parameter set", path, offset=off)
                mv = np.frombuffer(data, dtype="<f8", count=2 * size, offset=off)
                if len(mv) != 2 * size:
                    raise ParseError("truncated moment vectors", path, offset=off)
                if not np.isfinite(mv).all():
                    raise ParseError("non-finite moment value", path, offset=off)
                off += 16 * size
                shape = tensor.shape
                state.m[pname] = torch.from_numpy(mv[:size].astype(np.float64).reshape(shape))
                state.v[pname] = torch.from_numpy(mv[size:].astype(np.float64).reshape(shape))
    except (struct.error, ValueError) as exc:
        if isinstance(exc, ParseError):
            raise
        raise ParseError(f"truncated or malformed optimizer state ({exc})", path, offset=off) from None
    if off != len(data):
        raise ParseError("trailing bytes after optimizer state", path, offset=off)
    return state


# key=value config ------------------------------------------------------

def read_keyvalue(path):
    out = {}
    with open(path) as fh:
        for no, raw in enumerate(fh, 1):
            text = raw.split("#", 1)[0].strip()
            if not text:
                continue
            if "=" not in text:
                raise ParseError("expected key=value", path, no)
            key, value = (s.strip() for s in text.split("=", 1))
            if not key:
                raise ParseError("empty key", path, no)
            out[key] = value
    return out


def write_keyvalue(path, mapping):
    with atomic_open(path) as fh:
        for key, value in mapping.items():
            fh.write(f"{key}={value}\n")


# scene bundle ----------------------------------------------------------

def write_scene(out_dir, scene, init_cameras=None):
    """Write ``cameras.txt``, ``images/####.ppm|.pfm``, ``corrs.txt``, ``field.rfg``, ``meta.txt``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    write_cameras(out / "cameras.txt", scene.cameras)
    if init_cameras is not None:
        write_cameras(out / "cameras_init.txt", init_cameras)
    for i, img in enumerate(scene.images):
        write_ppm(out / "images" / f"{i:04d}.ppm", img)
        write_pfm(out / "images" / f"{i:04d}.pfm", img)
    write_correspondences(out / "corrs.txt", scene.corrs)
    write_field(out / "field.rfg", scene.field)
    meta = {"seed": scene.seed, "near": repr(scene.spec.near), "far": repr(scene.spec.far)}
    meta.update(scene.meta)
    write_keyvalue(out / "meta.txt", meta)


def read_images(directory, count=None):
    """Images ``####`` from a directory, preferring float PFM over 8-bit PPM."""
    directory = Path(directory)
    stems = sorted({p.stem for p in directory.iterdir() if p.suffix in (".ppm", ".pfm")})
    if count is not None:
        stems = stems[:count]
    imgs = []
    for stem in stems:
        pfm = directory / f"{stem}.pfm"
        imgs.append(read_image(pfm if pfm.exists() else directory / f"{stem}.ppm"))
    return np.stack(imgs) if imgs else np.zeros((0, 0, 0, 3))
