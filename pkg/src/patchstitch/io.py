"""File formats: PLY point clouds, OBJ/MTL patch meshes, atlas blobs,
fit configuration files and run manifests."""

import colorsys
import configparser
import dataclasses
import hashlib
import json
import math
import struct
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .fit import FitConfig
from .losses import ConsistencyConfig, LossWeights
from .patchmodel import ACTIVATION, Atlas, MarginSpec, forward, sample_uv
from .spatial import GroundTruthCloud, NeighborConfig, NeighborIndex, PredictedCloud, neighborhood_normals

NORMAL_ESTIMATE_N = 16


class PLYError(ValueError):
    pass


class PLYHeaderError(PLYError):
    pass


class PLYTruncatedError(PLYError):
    pass


class PatchIdOverflowError(PLYError):
    pass


class AtlasFormatError(ValueError):
    pass


class ArchitectureMismatchError(AtlasFormatError):
    pass


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- PLY

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _parse_header(f):
    first = f.readline()
    if first.strip() != b"ply":
        raise PLYHeaderError("missing 'ply' magic line")
    fmt = None
    comments = []
    elements = []
    while True:
        raw = f.readline()
        if not raw:
            raise PLYHeaderError("header ends before 'end_header'")
        line = raw.decode("ascii", errors="replace").strip()
        if not line:
            continue
        tok = line.split()
        if tok[0] == "end_header":
            break
        if tok[0] == "format":
            if len(tok) != 3 or tok[1] not in ("ascii", "binary_little_endian"):
                raise PLYHeaderError(f"unsupported format line {line!r}")
            fmt = tok[1]
        elif tok[0] in ("comment", "obj_info"):
            comments.append(line.split(None, 1)[1] if len(tok) > 1 else "")
        elif tok[0] == "element":
            if len(tok) != 3 or not tok[2].isdigit():
                raise PLYHeaderError(f"bad element line {line!r}")
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if not elements:
                raise PLYHeaderError("property before any element")
            if tok[1] == "list":
                if elements[-1][0] == "vertex":
                    raise PLYHeaderError("list properties on vertices are not supported")
                elements[-1][2].append(("list", None))
                continue
            if len(tok) != 3 or tok[1] not in _PLY_TYPES:
                raise PLYHeaderError(f"bad property line {line!r}")
            elements[-1][2].append((tok[2], _PLY_TYPES[tok[1]]))
        else:
            raise PLYHeaderError(f"unexpected header line {line!r}")
    if fmt is None:
        raise PLYHeaderError("missing format line")
    if not elements or elements[0][0] != "vertex":
        raise PLYHeaderError("the first element must be 'vertex'")
    return fmt, comments, elements[0][1], elements[0][2]


def read_ply(path):
    """Vertex properties of a PLY file as ``({name: array}, comments)``.

    Elements after ``vertex`` (faces etc.) are ignored.
    """
    with open(path, "rb") as f:
        fmt, comments, n, props = _parse_header(f)
        names = [p[0] for p in props]
        if len(set(names)) != len(names):
            raise PLYHeaderError("duplicate vertex property")
        if fmt == "binary_little_endian":
            dtype = np.dtype([(name, "<" + t) for name, t in props])
            buf = f.read(dtype.itemsize * n)
            if len(buf) < dtype.itemsize * n:
                raise PLYTruncatedError(f"expected {n} vertices, payload holds {len(buf) // dtype.itemsize}")
            rec = np.frombuffer(buf, dtype=dtype, count=n)
            return {name: rec[name].astype(np.dtype(t).newbyteorder("=")) for name, t in props}, comments
        rows = []
        for i in range(n):
            raw = f.readline()
            if not raw:
                raise PLYTruncatedError(f"expected {n} vertices, found {i}")
            vals = raw.split()
            if len(vals) < len(props):
                raise PLYTruncatedError(f"vertex {i} has {len(vals)} values, expected {len(props)}")
            rows.append(vals[:len(props)])
    out = {}
    for j, (name, t) in enumerate(props):
        col = [r[j] for r in rows]
        try:
            out[name] = np.array([float(x) for x in col] if t[0] == "f" else [int(x) for x in col],
                                 dtype=np.dtype(t))
        except ValueError as exc:
            raise PLYError(f"bad value in property {name!r}: {exc}") from None
    return out, comments


def write_ply(path, props, comments=(), ascii=False):
    """Write vertex properties (ordered dict of equal-length 1-D arrays)."""
    n = len(next(iter(props.values())))
    type_name = {"f8": "double", "f4": "float", "u1": "uchar", "i4": "int", "i8": "int"}
    cols = []
    for name, arr in props.items():
        arr = np.asarray(arr)
        if arr.shape != (n,):
            raise ValueError(f"property {name!r} has the wrong length")
        code = arr.dtype.str[1:]
        if code not in type_name:
            raise ValueError(f"unsupported dtype {arr.dtype} for {name!r}")
        if code == "i8":
            arr = arr.astype(np.int32)
            code = "i4"
        cols.append((name, code, arr))
    head = ["ply", f"format {'ascii' if ascii else 'binary_little_endian'} 1.0"]
    head += [f"comment {c}" for c in comments]
    head.append(f"element vertex {n}")
    head += [f"property {type_name[code]} {name}" for name, code, _ in cols]
    head.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(head) + "\n").encode("ascii"))
        if ascii:
            for i in range(n):
                f.write((" ".join(repr(float(a[i])) if c[0] == "f" else str(int(a[i])) for _, c, a in cols)
                         + "\n").encode("ascii"))
        else:
            rec = np.empty(n, dtype=[(name, "<" + code) for name, code, _ in cols])
            for name, _, arr in cols:
                rec[name] = arr
            f.write(rec.tobytes())


def estimate_normals(points, n=NORMAL_ESTIMATE_N):
    """Covariance normals of the ``n`` nearest points (self included),
    oriented away from the centroid."""
    idx, _ = NeighborIndex(points).knn(points, min(n, len(points)))
    nv, _, _ = neighborhood_normals(points, idx, grad=False)
    nrm = nv.value.copy()
    flip = np.einsum("ij,ij->i", nrm, points - points.mean(axis=0)) < 0
    nrm[flip] *= -1
    return nrm


def estimate_area(points, k=8):
    """Rough surface area from the median k-NN disc of every sample."""
    _, d2 = NeighborIndex(points).knn(points, k + 1)
    return float(len(points) * math.pi * np.median(d2[:, k]) / k)


def _unit(nrm):
    lens = np.linalg.norm(nrm, axis=1, keepdims=True)
    off = np.abs(lens[:, 0] - 1.0) > 1e-12
    if np.any(lens == 0):
        raise PLYError("zero-length normal in file")
    if off.any():
        nrm = nrm.copy()
        nrm[off] /= lens[off]
    return nrm


def read_pointcloud(path):
    """Load a target cloud; missing normals or area are estimated with a warning."""
    props, comments = read_ply(path)
    for c in "xyz":
        if c not in props:
            raise PLYHeaderError(f"vertex property {c!r} missing")
    pts = np.column_stack([props[c].astype(np.float64) for c in "xyz"])
    if all(c in props for c in ("nx", "ny", "nz")):
        nrm = _unit(np.column_stack([props[c].astype(np.float64) for c in ("nx", "ny", "nz")]))
    else:
        warnings.warn(f"{path}: no normals, estimating them from {NORMAL_ESTIMATE_N} neighbours", stacklevel=2)
        nrm = estimate_normals(pts)
    area = None
    for c in comments:
        tok = c.split()
        if len(tok) == 2 and tok[0] == "area":
            area = float(tok[1])
    if area is None:
        warnings.warn(f"{path}: no area comment, estimating surface area from sample density", stacklevel=2)
        area = estimate_area(pts)
    return GroundTruthCloud(pts, nrm, area)


def write_pointcloud(path, cloud, ascii=False):
    """Write a :class:`GroundTruthCloud` or a :class:`PredictedCloud` as PLY."""
    comments = [f"patchstitch {__version__}"]
    if isinstance(cloud, GroundTruthCloud):
        props = {"x": cloud.points[:, 0], "y": cloud.points[:, 1], "z": cloud.points[:, 2],
                 "nx": cloud.normals[:, 0], "ny": cloud.normals[:, 1], "nz": cloud.normals[:, 2]}
        comments.append(f"area {float(cloud.area)!r}")
    elif isinstance(cloud, PredictedCloud):
        if cloud.n_patches > 255:
            raise PatchIdOverflowError(f"{cloud.n_patches} patches do not fit a uint8 patch_id")
        p = cloud.positions
        props = {"x": p[:, 0], "y": p[:, 1], "z": p[:, 2]}
        if cloud.ju is not None:
            n, _ = cloud.analytic_normals()
            props.update(nx=n.value[:, 0], ny=n.value[:, 1], nz=n.value[:, 2])
        props["patch_id"] = cloud.patch_ids.astype(np.uint8)
    else:
        raise TypeError(f"cannot write {type(cloud).__name__}")
    write_ply(path, props, comments, ascii=ascii)


# ---------------------------------------------------------------- meshes


def _palette(n=25):
    cols = []
    for i in range(n):
        h = (i * 0.618033988749895) % 1.0
        s, v = (0.75, 0.95) if i % 2 == 0 else (0.55, 0.75)
        cols.append(tuple(round(x, 4) for x in colorsys.hsv_to_rgb(h, s, v)))
    return tuple(cols)


PALETTE = _palette()


def export_mesh(atlas, grid_resolution, path):
    """One OBJ object per patch on a regular UV grid, plus a material file.

    Returns the number of quads written per patch.
    """
    res = int(grid_resolution)
    if res < 2:
        raise ValueError("grid resolution must be >= 2")
    path = Path(path)
    mtl = path.with_suffix(".mtl")
    uv = sample_uv(res * res, "regular-grid")
    pts, _ = forward(atlas, np.broadcast_to(uv, (atlas.K,) + uv.shape).copy(), jacobian=False)
    pts = pts.value if hasattr(pts, "value") else pts
    with open(mtl, "w") as f:
        for k in range(atlas.K):
            r, g, b = PALETTE[k % len(PALETTE)]
            f.write(f"newmtl patch{k}\nKd {r} {g} {b}\n\n")
    faces = []
    with open(path, "w") as f:
        f.write(f"# patchstitch {__version__}\nmtllib {mtl.name}\n")
        base = 1
        for k in range(atlas.K):
            f.write(f"o patch{k}\nusemtl patch{k}\n")
            for x, y, z in pts[k]:
                f.write(f"v {float(x)!r} {float(y)!r} {float(z)!r}\n")
            count = 0
            for i in range(res - 1):
                for j in range(res - 1):
                    a = base + i * res + j
                    f.write(f"f {a} {a + res} {a + res + 1} {a + 1}\n")
                    count += 1
            faces.append(count)
            base += res * res
    return faces


def read_obj(path):
    """Minimal OBJ reader: ``(vertices, {object: [faces]}, {object: material})``."""
    verts, faces, mats = [], {}, {}
    cur = None
    with open(path) as f:
        for line in f:
            tok = line.split()
            if not tok:
                continue
            if tok[0] == "v":
                verts.append([float(x) for x in tok[1:4]])
            elif tok[0] == "o":
                cur = tok[1]
                faces[cur] = []
            elif tok[0] == "usemtl":
                mats[cur] = tok[1]
            elif tok[0] == "f":
                faces.setdefault(cur, []).append([int(x.split("/")[0]) - 1 for x in tok[1:]])
    return np.array(verts), faces, mats


# ---------------------------------------------------------------- atlas blobs

_MAGIC = b"PSATLAS\0"
_BLOB_VERSION = 1
_HEADER = struct.Struct("<8sIIII16sQ")


def save_atlas(path, atlas):
    tag = ACTIVATION.encode("ascii").ljust(16, b"\0")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(_MAGIC, _BLOB_VERSION, atlas.K, atlas.H, atlas.D, tag, atlas.n_params))
        f.write(np.ascontiguousarray(atlas.params, dtype="<f8").tobytes())


def load_atlas(path, expect=None):
    """Read an atlas blob; ``expect`` = ``(K, H, D)`` must match if given."""
    with open(path, "rb") as f:
        head = f.read(_HEADER.size)
        if len(head) < _HEADER.size:
            raise AtlasFormatError("truncated atlas header")
        magic, version, K, H, D, tag, n = _HEADER.unpack(head)
        if magic != _MAGIC:
            raise AtlasFormatError("not an atlas file")
        if version != _BLOB_VERSION:
            raise AtlasFormatError(f"unsupported atlas version {version}")
        act = tag.rstrip(b"\0").decode("ascii")
        if act != ACTIVATION:
            raise ArchitectureMismatchError(f"activation {act!r}, expected {ACTIVATION!r}")
        if expect is not None and tuple(expect) != (K, H, D):
            raise ArchitectureMismatchError(f"atlas is (K, H, D) = {(K, H, D)}, expected {tuple(expect)}")
        if n != Atlas.param_count(K, H, D):
            raise ArchitectureMismatchError(f"{n} parameters do not match (K, H, D) = {(K, H, D)}")
        buf = f.read(8 * n)
        if len(buf) < 8 * n:
            raise AtlasFormatError("truncated atlas payload")
    return Atlas(K, H, D, np.frombuffer(buf, dtype="<f8").astype(np.float64))


# ---------------------------------------------------------------- config files

# (section, key) -> (object path, FitConfig field or nested field)
_SECTIONS = {
    "fit": [f.name for f in dataclasses.fields(FitConfig) if f.name not in ("weights", "consistency", "margin")],
    "weights": [f.name for f in dataclasses.fields(LossWeights)],
    "consistency": ["normal_mode", "grad_through_global", "n", "theta"],
    "margin": ["r"],
}


def _fmt(v):
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def config_to_text(cfg):
    parts = []
    c = cfg.consistency
    values = {
        "fit": {k: getattr(cfg, k) for k in _SECTIONS["fit"]},
        "weights": dataclasses.asdict(cfg.weights),
        "consistency": {"normal_mode": c.normal_mode, "grad_through_global": c.grad_through_global,
                        "n": c.neighbor.n, "theta": c.neighbor.theta},
        "margin": {"r": cfg.margin.r},
    }
    for sec, kv in values.items():
        parts.append(f"[{sec}]")
        parts += [f"{k} = {_fmt(v)}" for k, v in kv.items()]
        parts.append("")
    return "\n".join(parts)


def _convert(raw, default, key):
    s = raw.strip()
    try:
        if s.lower() == "none":
            return None
        if isinstance(default, bool):
            if s.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(s)
            return s.lower() in ("true", "1", "yes")
        if isinstance(default, int):
            return int(s)
        if isinstance(default, float):
            return float(s)
        return s
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {key}") from None


def parse_config(text, base=None):
    """Build a :class:`FitConfig` from ``key = value`` text with sections.

    Keys not given keep the value of ``base`` (default: ``FitConfig()``).
    Unknown sections or keys are errors.
    """
    base = FitConfig() if base is None else base
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc).splitlines()[0]) from None
    for sec in cp.sections():
        if sec not in _SECTIONS:
            raise ConfigError(f"unknown section [{sec}]")
        for key in cp[sec]:
            if key not in _SECTIONS[sec]:
                raise ConfigError(f"unknown key {key!r} in [{sec}]")

    def get(sec, key, default):
        if cp.has_option(sec, key):
            return _convert(cp[sec][key], default if default is not None else 0, f"[{sec}] {key}")
        return default

    fit_kw = {k: get("fit", k, getattr(base, k)) for k in _SECTIONS["fit"]}
    w = LossWeights(**{k: get("weights", k, getattr(base.weights, k)) for k in _SECTIONS["weights"]})
    bc = base.consistency
    cons = ConsistencyConfig(get("consistency", "normal_mode", bc.normal_mode),
                             get("consistency", "grad_through_global", bc.grad_through_global),
                             NeighborConfig(get("consistency", "n", bc.neighbor.n),
                                            float(get("consistency", "theta", bc.neighbor.theta))))
    try:
        return FitConfig(weights=w, consistency=cons, margin=MarginSpec(float(get("margin", "r", base.margin.r))),
                         **fit_kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def read_config(path, base=None):
    return parse_config(Path(path).read_text(), base)


# ---------------------------------------------------------------- manifests


def file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def make_manifest(command, cfg, inputs, outputs, extra=None):
    from ._accel import get_backend

    return {
        "tool": "patchstitch",
        "version": __version__,
        "python": sys.version.split()[0],
        "numpy": np.__version__,
        "backend": get_backend(),
        "command": command,
        "seed": cfg.seed if cfg is not None else None,
        "config": config_to_text(cfg) if cfg is not None else None,
        "inputs": {k: {"path": str(p), "sha256": file_digest(p)} for k, p in inputs.items()},
        "outputs": {k: str(p) for k, p in outputs.items()},
        **(extra or {}),
    }


def write_manifest(path, manifest):
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def read_manifest(path):
    m = json.loads(Path(path).read_text())
    if m.get("tool") != "patchstitch":
        raise ValueError(f"{path} is not a run manifest")
    return m
