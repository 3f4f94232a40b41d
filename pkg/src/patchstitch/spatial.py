"""Point-cloud containers, exact neighbour search and covariance normals."""

import math
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from . import kernels

RANK_EPS = 1e-12


class DegenerateNeighborhoodError(ValueError):
    pass


class NeighborhoodTooSmallError(ValueError):
    pass


@dataclass
class GroundTruthCloud:
    """Target samples with unit normals and the total surface area."""

    points: np.ndarray
    normals: np.ndarray
    area: float

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.normals = np.ascontiguousarray(self.normals, dtype=np.float64).reshape(-1, 3)
        self.area = float(self.area)
        if self.points.shape[0] < 4:
            raise ValueError("ground truth needs at least 4 points")
        if self.normals.shape != self.points.shape:
            raise ValueError("points and normals differ in shape")
        lens = np.linalg.norm(self.normals, axis=1)
        if np.any(np.abs(lens - 1.0) > 1e-9):
            raise ValueError("ground-truth normals must be unit length")
        if not self.area > 0:
            raise ValueError("ground-truth area must be positive")

    def __len__(self):
        return self.points.shape[0]


@dataclass
class PredictedPoint:
    position: np.ndarray
    patch_id: int
    uv: tuple
    jacobian: np.ndarray
    analytic_normal: np.ndarray
    fff: object


@dataclass
class PredictedCloud:
    """Decoded samples of all patches, stored as arrays (patch-major order).

    ``points``, ``ju`` and ``jv`` may be :class:`~patchstitch.diffcore.Var`
    so losses stay differentiable. ``fff`` optionally overrides the metric
    tensor computed from the Jacobian columns (handy for hand-made inputs).
    """

    points: object
    patch_ids: np.ndarray
    n_patches: int
    uv: np.ndarray = None
    ju: object = None
    jv: object = None
    fff: tuple = None
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.points = dc.as_var(self.points)
        self.patch_ids = np.asarray(self.patch_ids, dtype=np.int64).ravel()
        if self.points.value.shape != (self.patch_ids.size, 3):
            raise ValueError("points must be (P, 3) matching patch_ids")
        if self.patch_ids.size and (self.patch_ids.min() < 0 or self.patch_ids.max() >= self.n_patches):
            raise ValueError("patch id out of range")
        if not np.all(np.isfinite(self.points.value)):
            raise ValueError("non-finite predicted positions")

    def __len__(self):
        return self.patch_ids.size

    @property
    def positions(self):
        return self.points.value

    def metric_tensor(self):
        """(E, F, G) as Vars, one entry per point."""
        if self.fff is not None:
            return tuple(dc.as_var(x) for x in self.fff)
        if "fff" not in self._cache:
            if self.ju is None:
                raise ValueError("cloud carries no Jacobian")
            ju, jv = dc.as_var(self.ju), dc.as_var(self.jv)
            self._cache["fff"] = (dc.dot(ju, ju), dc.dot(ju, jv), dc.dot(jv, jv))
        return self._cache["fff"]

    def analytic_normals(self, eps=1e-12):
        """Unit ``ju x jv`` per point and a mask of degenerate Jacobians.

        Degenerate rows (cross-product norm <= eps) carry a zero vector.
        """
        if "normals" not in self._cache:
            c = dc.cross(self.ju, self.jv)
            nrm = dc.norm(c)
            bad = nrm.value <= eps
            safe = dc.add(nrm, dc.const(np.where(bad, 1.0, 0.0)))
            n = c / dc.reshape(safe, (-1, 1))
            n = n * dc.const(np.where(bad, 0.0, 1.0)[:, None])
            self._cache["normals"] = (n, bad)
        return self._cache["normals"]

    def index(self):
        if "index" not in self._cache:
            self._cache["index"] = NeighborIndex(self.positions)
        return self._cache["index"]

    def point(self, i):
        from .patchmodel import FirstFundamentalForm

        E, F, G = (float(x.value[i]) for x in self.metric_tensor())
        jac = np.stack([dc.as_var(self.ju).value[i], dc.as_var(self.jv).value[i]], axis=1)
        n, bad = self.analytic_normals()
        return PredictedPoint(self.positions[i].copy(), int(self.patch_ids[i]),
                              tuple(self.uv[i]) if self.uv is not None else None, jac,
                              None if bad[i] else n.value[i].copy(), FirstFundamentalForm(E, F, G))


@dataclass(frozen=True)
class NeighborConfig:
    n: int = 8
    theta: float = 120.0

    def __post_init__(self):
        if self.n < 3:
            raise ValueError("neighbourhood size must be >= 3")
        if not 0.0 < self.theta < 180.0:
            raise ValueError("theta must lie in (0, 180) degrees")


class NeighborIndex:
    """Exact kNN / radius queries over a fixed point set.

    Results equal a brute-force scan, with ties broken by ascending index.
    """

    def __init__(self, points):
        pts = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
        if pts.shape[0] == 0:
            raise ValueError("cannot index an empty point set")
        self.points = pts
        self._tree = kernels.build_tree(pts)

    def __len__(self):
        return self.points.shape[0]

    def knn(self, queries, k, **filters):
        return kernels.knn(self._tree, queries, k, **filters)

    def nearest(self, queries):
        idx, d2 = self.knn(queries, 1)
        return idx[:, 0], d2[:, 0]

    def radius(self, queries, r):
        return kernels.radius(self._tree, queries, r)

    def count_labels_within(self, queries, r, labels, n_labels):
        return kernels.count_labels_within(self._tree, queries, r, labels, n_labels)


def build_index(points):
    return NeighborIndex(points)


def associate_gt(pred, gt, gt_index=None):
    """Nearest GT point (ties: lowest index) and its normal for each prediction."""
    positions = pred.positions if isinstance(pred, PredictedCloud) else np.asarray(pred, dtype=np.float64)
    if len(positions) == 0:
        raise ValueError("empty prediction")
    if gt_index is None:
        gt_index = NeighborIndex(gt.points)
    idx, _ = gt_index.nearest(positions)
    return idx, gt.normals[idx]


def patch_neighborhoods(pred, n, index=None):
    """``n`` nearest same-patch points for every point (self excluded)."""
    counts = np.bincount(pred.patch_ids, minlength=pred.n_patches)
    if np.any(counts[counts > 0] < n + 1):
        raise NeighborhoodTooSmallError(f"a patch has fewer than {n} other points")
    if index is None:
        index = pred.index()
    P = len(pred)
    idx, _ = index.knn(pred.positions, n, self_idx=np.arange(P), labels=pred.patch_ids,
                       qlabels=pred.patch_ids, label_mode=kernels.LABEL_SAME)
    return idx


def patch_neighborhood(pred, query, n, index=None):
    counts = np.bincount(pred.patch_ids, minlength=pred.n_patches)
    if counts[pred.patch_ids[query]] < n + 1:
        raise NeighborhoodTooSmallError(f"patch {pred.patch_ids[query]} has fewer than {n} other points")
    if index is None:
        index = pred.index()
    idx, _ = index.knn(pred.positions[query:query + 1], n, self_idx=np.array([query]),
                       labels=pred.patch_ids, qlabels=pred.patch_ids[query:query + 1],
                       label_mode=kernels.LABEL_SAME)
    return idx[0]


def constrained_neighborhoods(pred, assoc_normals, cfg, index=None, queries=None):
    """Global neighbourhoods filtered by the angle between associated GT normals.

    Candidate ``j`` of query ``i`` is admissible iff
    ``arccos(clip(n_i . n_j, -1, 1)) < theta``. Queries with fewer than three
    admissible candidates fall back to unconstrained search.

    Returns ``(idx, fallback)``; ``idx`` is ``(Q, n)`` padded with ``-1`` when
    between 3 and ``n - 1`` candidates pass the filter.
    """
    if index is None:
        index = pred.index()
    q = np.arange(len(pred)) if queries is None else np.asarray(queries, dtype=np.int64)
    normals = np.ascontiguousarray(assoc_normals, dtype=np.float64)
    idx, _ = index.knn(pred.positions[q], cfg.n, self_idx=q, normals=normals, qnormals=normals[q],
                       theta=math.radians(cfg.theta))
    fallback = (idx >= 0).sum(axis=1) < 3
    if fallback.any():
        fq = q[fallback]
        idx_f, _ = index.knn(pred.positions[fq], cfg.n, self_idx=fq)
        idx[fallback] = idx_f
    return idx, fallback


def constrained_knn(pred, query, cfg, assoc_normals, index=None):
    idx, fb = constrained_neighborhoods(pred, assoc_normals, cfg, index=index, queries=[query])
    row = idx[0]
    return row[row >= 0], bool(fb[0])


def neighborhood_normals(points, idx, grad=True):
    """Covariance normals of gathered neighbourhoods.

    ``points`` is a (P, 3) Var or array, ``idx`` an integer (Q, n) array with
    ``-1`` padding. Returns ``(normals Var (Q, 3), gap (Q,), degenerate (Q,))``.
    A row is degenerate when it has fewer than 3 members or its two smallest
    eigenvalues are both below 1e-12.
    """
    points = dc.as_var(points) if grad else dc.const(points)
    idx = np.asarray(idx, dtype=np.int64)
    valid = idx >= 0
    cnt = valid.sum(axis=1)
    safe_idx = np.where(valid, idx, 0)
    X = dc.take(points, safe_idx)  # (Q, n, 3)
    w = dc.const(valid[..., None].astype(np.float64))
    inv = dc.const((1.0 / np.maximum(cnt, 1))[:, None, None])
    mu = dc.vsum(X * w, axis=1, keepdims=True) * inv
    Y = (X - mu) * w
    C = dc.matmul(dc.swaplast(Y), Y) * inv
    v = dc.sym3_min_eigvec(C)
    wv = v.aux["w"]
    degenerate = (cnt < 3) | (wv[:, 1] < RANK_EPS)
    return v, v.aux["gap"], degenerate


def covariance_normal(points):
    """Unit smallest-eigenvalue eigenvector of the centred covariance.

    Returns ``(normal, eigen_gap)``; the sign is arbitrary.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if pts.shape[0] < 3:
        raise DegenerateNeighborhoodError("need at least 3 points")
    v, gap, deg = neighborhood_normals(pts, np.arange(pts.shape[0])[None, :], grad=False)
    if deg[0]:
        raise DegenerateNeighborhoodError("neighbourhood has rank < 2")
    return v.value[0].copy(), float(gap[0])
