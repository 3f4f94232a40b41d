"""Synthetic targets with exact normals and areas, plus normalisation."""

import math
from dataclasses import dataclass, field

import numpy as np

from .spatial import GroundTruthCloud

KINDS = ("plane", "sphere", "torus", "box", "plane-with-hole", "two-sheets")

_DEFAULTS = {
    "plane": {"size": 1.0},
    "sphere": {"radius": 1.0},
    "torus": {"R": 1.0, "r": 0.3},
    "box": {"sx": 1.0, "sy": 1.0, "sz": 1.0},
    "plane-with-hole": {"size": 1.0, "hole": 0.25},
    "two-sheets": {"size": 1.0, "gap": 0.05},
}


@dataclass(frozen=True)
class ShapeSpec:
    """``params`` overrides the per-kind defaults (see ``_DEFAULTS``)."""

    kind: str
    n: int = 2000
    noise: float = 0.0
    seed: int = 0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown shape kind {self.kind!r}; choose from {', '.join(KINDS)}")
        if self.n < 4:
            raise ValueError("need at least 4 samples")
        if not self.noise >= 0:
            raise ValueError("noise must be non-negative")
        unknown = set(self.params) - set(_DEFAULTS[self.kind])
        if unknown:
            raise ValueError(f"unknown parameters for {self.kind}: {sorted(unknown)}")
        for k, v in self.resolved().items():
            if not v > 0:
                raise ValueError(f"parameter {k} must be positive")
        if self.kind == "torus" and not self.resolved()["r"] < self.resolved()["R"]:
            raise ValueError("torus needs r < R")
        if self.kind == "plane-with-hole" and not self.resolved()["hole"] < self.resolved()["size"] / 2:
            raise ValueError("hole radius must be below half the plane size")

    def resolved(self):
        return {**_DEFAULTS[self.kind], **self.params}


def _square(rng, n, size, z=0.0):
    xy = (rng.random((n, 2)) - 0.5) * size
    return np.column_stack([xy, np.full(n, z)])


def _plane(rng, n, size):
    pts = _square(rng, n, size)
    return pts, np.tile([0.0, 0.0, 1.0], (n, 1)), size * size


def _sphere(rng, n, radius):
    d = rng.standard_normal((n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return radius * d, d, 4.0 * math.pi * radius ** 2


def _torus(rng, n, R, r):
    # the tube angle v has density proportional to (R + r cos v)
    out_u = np.empty(0)
    out_v = np.empty(0)
    while out_u.size < n:
        u = rng.random(2 * n) * 2 * math.pi
        v = rng.random(2 * n) * 2 * math.pi
        keep = rng.random(2 * n) * (R + r) < R + r * np.cos(v)
        out_u = np.concatenate([out_u, u[keep]])
        out_v = np.concatenate([out_v, v[keep]])
    u, v = out_u[:n], out_v[:n]
    nrm = np.column_stack([np.cos(v) * np.cos(u), np.cos(v) * np.sin(u), np.sin(v)])
    pts = np.column_stack([(R + r * np.cos(v)) * np.cos(u), (R + r * np.cos(v)) * np.sin(u), r * np.sin(v)])
    return pts, nrm, 4.0 * math.pi ** 2 * R * r


def _box(rng, n, sx, sy, sz):
    half = np.array([sx, sy, sz]) / 2
    faces = []
    for axis in range(3):
        a, b = [i for i in range(3) if i != axis]
        for sign in (-1.0, 1.0):
            faces.append((axis, sign, a, b, 2 * half[a] * 2 * half[b]))
    areas = np.array([f[4] for f in faces])
    which = rng.choice(6, size=n, p=areas / areas.sum())
    s = rng.random((n, 2)) - 0.5
    pts = np.zeros((n, 3))
    nrm = np.zeros((n, 3))
    for f, (axis, sign, a, b, _) in enumerate(faces):
        m = which == f
        pts[m, axis] = sign * half[axis]
        pts[m, a] = s[m, 0] * 2 * half[a]
        pts[m, b] = s[m, 1] * 2 * half[b]
        nrm[m, axis] = sign
    return pts, nrm, float(areas.sum())


def _plane_with_hole(rng, n, size, hole):
    pts = np.empty((0, 3))
    while pts.shape[0] < n:
        cand = _square(rng, 2 * n, size)
        pts = np.vstack([pts, cand[np.hypot(cand[:, 0], cand[:, 1]) >= hole]])
    pts = pts[:n]
    return pts, np.tile([0.0, 0.0, 1.0], (n, 1)), size * size - math.pi * hole ** 2


def _two_sheets(rng, n, size, gap):
    top = rng.random(n) < 0.5
    pts = _square(rng, n, size)
    pts[:, 2] = np.where(top, gap / 2, -gap / 2)
    nrm = np.zeros((n, 3))
    nrm[:, 2] = np.where(top, 1.0, -1.0)
    return pts, nrm, 2 * size * size


_GEN = {"plane": _plane, "sphere": _sphere, "torus": _torus, "box": _box,
        "plane-with-hole": _plane_with_hole, "two-sheets": _two_sheets}


def gen_shape(spec):
    """Area-uniform samples with exact unit normals and the exact area.

    Noise (std ``spec.noise``) is applied along the normals after they are
    assigned, so the normals stay those of the clean surface.
    """
    rng = np.random.default_rng(spec.seed)
    pts, nrm, area = _GEN[spec.kind](rng, spec.n, **spec.resolved())
    if spec.noise > 0:
        pts = pts + spec.noise * rng.standard_normal(spec.n)[:, None] * nrm
    return GroundTruthCloud(pts, nrm, area)


def sheet_labels(cloud):
    """+1 / -1 per point of a two-sheets cloud (upper / lower sheet)."""
    return np.where(cloud.normals[:, 2] > 0, 1, -1)


@dataclass(frozen=True)
class Transform:
    """``normalized = (x - center) * scale``."""

    center: tuple
    scale: float

    def apply(self, pts):
        return (np.asarray(pts, dtype=np.float64) - np.asarray(self.center)) * self.scale

    def invert(self, pts):
        return np.asarray(pts, dtype=np.float64) / self.scale + np.asarray(self.center)


def normalize(cloud):
    """Centroid to the origin, largest bounding-box half-extent to 1.

    Returns ``(cloud, Transform)``; the area scales with ``scale**2``.
    """
    c = cloud.points.mean(axis=0)
    half = (cloud.points.max(axis=0) - cloud.points.min(axis=0)).max() / 2
    if not half > 0:
        raise ValueError("cloud has zero extent")
    tr = Transform(tuple(float(x) for x in c), float(1.0 / half))
    return GroundTruthCloud(tr.apply(cloud.points), cloud.normals.copy(), cloud.area * tr.scale ** 2), tr


def denormalize(cloud, tr):
    return GroundTruthCloud(tr.invert(cloud.points), cloud.normals.copy(), cloud.area / tr.scale ** 2)
