"""Differentiable loss terms of the patch-atlas objective.

Every function takes a :class:`~patchstitch.spatial.PredictedCloud` whose
arrays may be tape Vars and returns a Var. Nearest-neighbour selections are
computed from current positions and treated as constants.

Optional ``sel`` dicts cache those selections so a caller can hold them fixed
for several iterations; pass an empty dict to populate it.
"""

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import diffcore as dc
from .spatial import (NeighborConfig, NeighborIndex, constrained_neighborhoods, neighborhood_normals,
                      patch_neighborhoods)


@dataclass(frozen=True)
class LossWeights:
    alpha_E: float = 0.001
    alpha_G: float = 0.001
    alpha_sk: float = 0.001
    alpha_ol: float = 0.1
    alpha_sc: float = 0.001
    alpha_st: float = 0.001

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be non-negative")

    def replace(self, **kw):
        return LossWeights(**{**asdict(self), **kw})


@dataclass(frozen=True)
class ConsistencyConfig:
    normal_mode: str = "analytic"
    grad_through_global: bool = True
    neighbor: NeighborConfig = field(default_factory=NeighborConfig)

    def __post_init__(self):
        if self.normal_mode not in ("analytic", "approximate"):
            raise ValueError(f"unknown normal mode {self.normal_mode!r}")


@dataclass
class LossBreakdown:
    chd: float = 0.0
    l_E: float = 0.0
    l_G: float = 0.0
    l_sk: float = 0.0
    l_ol: float = 0.0
    l_sc: float = 0.0
    l_st: float = 0.0
    total: float = 0.0

    FIELDS = ("chd", "l_E", "l_G", "l_sk", "l_ol", "l_sc", "l_st", "total")

    def as_tuple(self):
        return tuple(getattr(self, f) for f in self.FIELDS)


def _sqdist(a, b):
    d = a - b
    return dc.dot(d, d)


def chamfer(pred, gt, gt_index=None, sel=None):
    """Two-sided mean squared nearest-neighbour distance."""
    if len(pred) == 0 or len(gt) == 0:
        raise ValueError("chamfer distance of an empty cloud")
    sel = {} if sel is None else sel
    if "chd_fwd" not in sel:
        if gt_index is None:
            gt_index = NeighborIndex(gt.points)
        sel["chd_fwd"] = gt_index.nearest(pred.positions)[0]
        sel["chd_bwd"] = pred.index().nearest(gt.points)[0]
    fwd = dc.mean(_sqdist(pred.points, dc.const(gt.points[sel["chd_fwd"]])))
    bwd = dc.mean(_sqdist(dc.const(gt.points), dc.take(pred.points, sel["chd_bwd"])))
    return fwd + bwd


def area_elements(pred):
    """``sqrt(max(0, EG - F^2))`` per point."""
    E, F, G = pred.metric_tensor()
    return dc.sqrt0(E * G - F * F)


def patch_areas(pred):
    """Monte-Carlo area of every patch from the cloud's own samples."""
    onehot = (pred.patch_ids[None, :] == np.arange(pred.n_patches)[:, None]).astype(np.float64)
    counts = onehot.sum(axis=1)
    if np.any(counts == 0):
        raise ValueError("every patch needs at least one sample")
    return dc.matmul(dc.const(onehot / counts[:, None]), area_elements(pred))


def _per_point_area(pred, areas):
    areas = dc.as_var(areas)
    if np.any(areas.value <= 0):
        raise ValueError("patch areas must be positive")
    return dc.take(areas, pred.patch_ids)


def distortion(pred, areas):
    """Stretch penalties (l_E, l_G): squared deviation of E and G from their
    global means, normalised by the owning patch's area."""
    E, _, G = pred.metric_tensor()
    A = _per_point_area(pred, areas)
    l_E = dc.mean(dc.square((E - dc.mean(E)) / A))
    l_G = dc.mean(dc.square((G - dc.mean(G)) / A))
    return l_E, l_G


def skew(pred, areas):
    _, F, _ = pred.metric_tensor()
    return dc.mean(dc.square(F / _per_point_area(pred, areas)))


def overlap(areas, gt_area):
    if not gt_area > 0:
        raise ValueError("ground-truth area must be positive")
    return dc.square(dc.hinge(dc.vsum(areas) - float(gt_area)))


def surface_consistency(pred, gt, cfg, gt_index=None, sel=None, diagnostics=None):
    """Mean ``1 - (n_p . n_g)^2`` between patch-local and global normals.

    ``n_g`` comes from the covariance of the GT-normal-constrained global
    neighbourhood; ``n_p`` is the analytic normal or the covariance normal of
    the same-patch neighbourhood. Points with a degenerate estimate on
    either side are skipped and counted in ``diagnostics``.
    """
    sel = {} if sel is None else sel
    nb = cfg.neighbor
    if "sc_global" not in sel:
        if gt_index is None:
            gt_index = NeighborIndex(gt.points)
        assoc = gt_index.nearest(pred.positions)[0]
        sel["sc_global"], sel["sc_fallback"] = constrained_neighborhoods(pred, gt.normals[assoc], nb)
        if cfg.normal_mode == "approximate":
            sel["sc_patch"] = patch_neighborhoods(pred, nb.n)
    n_g, _, deg_g = neighborhood_normals(pred.points, sel["sc_global"], grad=cfg.grad_through_global)
    if cfg.normal_mode == "analytic":
        n_p, deg_p = pred.analytic_normals()
    else:
        n_p, _, deg_p = neighborhood_normals(pred.points, sel["sc_patch"])
    valid = ~(deg_g | deg_p)
    if diagnostics is not None:
        diagnostics["sc_fallback"] = np.bincount(pred.patch_ids[sel["sc_fallback"]], minlength=pred.n_patches)
        diagnostics["sc_skipped"] = int((~valid).sum())
    n_valid = int(valid.sum())
    if n_valid == 0:
        return dc.Var(0.0)
    c = dc.dot(n_p, n_g)
    per = (1.0 - c * c) * dc.const(valid.astype(np.float64))
    return dc.vsum(per) / float(n_valid)


def stitching(margins, pred, sel=None):
    """Sum over patches of the mean squared distance from each margin point
    to the closest regular sample of any other patch."""
    if pred.n_patches < 2:
        raise ValueError("stitching error needs at least two patches")
    sel = {} if sel is None else sel
    counts = np.bincount(margins.patch_ids, minlength=pred.n_patches)
    if np.any(counts == 0):
        raise ValueError("every patch needs at least one margin point")
    if "st_other" not in sel:
        idx, _ = pred.index().knn(margins.positions, 1, labels=pred.patch_ids, qlabels=margins.patch_ids,
                                  label_mode=2)
        sel["st_other"] = idx[:, 0]
    d = _sqdist(margins.points, dc.take(pred.points, sel["st_other"]))
    w = 1.0 / counts[margins.patch_ids]
    return dc.vsum(d * dc.const(w))


def total_loss(terms, weights):
    """Weighted sum in fixed order; absent terms count as 0.

    ``terms`` maps names from :attr:`LossBreakdown.FIELDS` (minus ``total``)
    to Vars. Returns ``(total Var, LossBreakdown)``.
    """
    total = dc.as_var(terms["chd"])
    for name, alpha in (("l_E", weights.alpha_E), ("l_G", weights.alpha_G), ("l_sk", weights.alpha_sk),
                        ("l_ol", weights.alpha_ol), ("l_sc", weights.alpha_sc), ("l_st", weights.alpha_st)):
        if alpha > 0 and name in terms:
            total = total + alpha * dc.as_var(terms[name])
    bd = LossBreakdown(**{k: float(dc.as_var(v).value) for k, v in terms.items()})
    bd.total = float(total.value)
    return total, bd


def compute_terms(pred, gt, weights, consistency, margins=None, gt_index=None, sel=None, diagnostics=None):
    """Every term with a positive weight (plus Chamfer) as a dict of Vars."""
    terms = {"chd": chamfer(pred, gt, gt_index, sel)}
    if weights.alpha_E > 0 or weights.alpha_G > 0 or weights.alpha_sk > 0 or weights.alpha_ol > 0:
        areas = patch_areas(pred)
        if weights.alpha_E > 0 or weights.alpha_G > 0:
            terms["l_E"], terms["l_G"] = distortion(pred, areas)
        if weights.alpha_sk > 0:
            terms["l_sk"] = skew(pred, areas)
        if weights.alpha_ol > 0:
            terms["l_ol"] = overlap(areas, gt.area)
    if weights.alpha_sc > 0:
        terms["l_sc"] = surface_consistency(pred, gt, consistency, gt_index, sel, diagnostics)
    if weights.alpha_st > 0:
        if margins is None:
            raise ValueError("stitching weight set but no margin samples given")
        terms["l_st"] = stitching(margins, pred, sel)
    return terms
