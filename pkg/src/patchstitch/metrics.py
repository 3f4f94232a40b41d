"""Evaluation metrics on a deterministic per-patch UV grid."""

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from . import losses
from .patchmodel import MarginSpec, predict, sample_uv
from .spatial import NeighborIndex, PredictedCloud, constrained_neighborhoods

EVAL_GRID = 32
OVERLAP_T = 0.05
METRIC_MARGIN = 0.1

REPORT_KEYS = ("cd", "m_ae", "m_s", "m_olap")


@dataclass
class MetricsReport:
    cd: float
    m_ae: float
    m_s: float | None
    m_olap: float
    per_patch: dict = field(default_factory=dict)
    skipped_normals: int = 0

    def row(self):
        return tuple(getattr(self, k) for k in REPORT_KEYS)

    def to_text(self):
        """``key = value`` lines followed by one tab-separated machine row."""
        lines = []
        for k in REPORT_KEYS:
            v = getattr(self, k)
            lines.append(f"{k} = {'absent' if v is None else repr(float(v))}")
        lines.append(f"skipped_normals = {self.skipped_normals}")
        for name, vals in self.per_patch.items():
            lines.append(f"{name} = {' '.join(repr(float(x)) for x in vals)}")
        lines.append("\t".join(REPORT_KEYS))
        lines.append("\t".join("absent" if v is None else repr(float(v)) for v in self.row()))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        kv = {}
        for line in text.splitlines():
            if " = " in line:
                k, v = line.split(" = ", 1)
                kv[k.strip()] = v.strip()

        def num(s):
            return None if s == "absent" else float(s)

        per_patch = {k: [float(x) for x in v.split()] for k, v in kv.items()
                     if k not in REPORT_KEYS and k != "skipped_normals"}
        return cls(num(kv["cd"]), num(kv["m_ae"]), num(kv["m_s"]), num(kv["m_olap"]), per_patch,
                   int(kv.get("skipped_normals", 0)))

    def __eq__(self, other):
        if not isinstance(other, MetricsReport):
            return NotImplemented
        return (self.row() == other.row() and self.skipped_normals == other.skipped_normals
                and self.per_patch.keys() == other.per_patch.keys()
                and all(np.array_equal(self.per_patch[k], other.per_patch[k]) for k in self.per_patch))


def metric_cd(pred, gt, gt_index=None):
    return float(losses.chamfer(pred, gt, gt_index).value)


def metric_angular_error(pred, gt, gt_index=None):
    """Mean unoriented angle (degrees) between analytic and associated GT normals.

    Returns ``(m_ae, skipped)`` where ``skipped`` counts degenerate normals.
    """
    if gt_index is None:
        gt_index = NeighborIndex(gt.points)
    n, bad = pred.analytic_normals()
    idx = gt_index.nearest(pred.positions)[0]
    ok = ~bad
    if not ok.any():
        return float("nan"), int(bad.sum())
    c = np.abs(np.einsum("ij,ij->i", n.value[ok], gt.normals[idx[ok]]))
    ang = np.degrees(np.arccos(np.clip(c, 0.0, 1.0)))
    return float(ang.mean()), int(bad.sum())


def margin_subset(pred, r=METRIC_MARGIN):
    """Sub-cloud of the points whose UV lies in the margin frame."""
    keep = MarginSpec(r).contains(pred.uv)
    return PredictedCloud(dc.const(pred.positions[keep]), pred.patch_ids[keep], pred.n_patches,
                          uv=pred.uv[keep])


def metric_stitching(pred, margins=None, r=METRIC_MARGIN):
    """Stitching error with margin points taken from ``pred``'s own grid."""
    if pred.n_patches < 2:
        raise ValueError("stitching metric is undefined for a single patch")
    if margins is None:
        margins = margin_subset(pred, r)
    return float(losses.stitching(margins, pred).value)


def per_patch_margin_error(pred, margins):
    idx, d2 = pred.index().knn(margins.positions, 1, labels=pred.patch_ids, qlabels=margins.patch_ids,
                               label_mode=2)
    sums = np.bincount(margins.patch_ids, weights=d2[:, 0], minlength=pred.n_patches)
    counts = np.bincount(margins.patch_ids, minlength=pred.n_patches)
    return sums / np.maximum(counts, 1)


def metric_overlap(pred, t=OVERLAP_T):
    """Mean number of distinct patches within distance ``t`` of each point."""
    if not t > 0:
        raise ValueError("overlap threshold must be positive")
    counts = pred.index().count_labels_within(pred.positions, t, pred.patch_ids, pred.n_patches)
    return float(counts.mean())


def eval_cloud(atlas, grid=EVAL_GRID):
    uv = sample_uv(grid * grid, "regular-grid")
    return predict(atlas, np.broadcast_to(uv, (atlas.K,) + uv.shape).copy())


def evaluate_atlas(atlas, gt, grid=EVAL_GRID, t=OVERLAP_T, r=METRIC_MARGIN, neighbor=None, gt_index=None):
    """All four metrics plus per-patch diagnostics on the fixed eval grid."""
    if gt_index is None:
        gt_index = NeighborIndex(gt.points)
    pred = eval_cloud(atlas, grid)
    cd = metric_cd(pred, gt, gt_index)
    m_ae, skipped = metric_angular_error(pred, gt, gt_index)
    per_patch = {"area": losses.patch_areas(pred).value.copy()}
    m_s = None
    if atlas.K >= 2:
        margins = margin_subset(pred, r)
        m_s = metric_stitching(pred, margins)
        per_patch["margin_error"] = per_patch_margin_error(pred, margins)
    if neighbor is not None:
        assoc = gt_index.nearest(pred.positions)[0]
        _, fb = constrained_neighborhoods(pred, gt.normals[assoc], neighbor)
        per_patch["fallback"] = np.bincount(pred.patch_ids[fb], minlength=atlas.K).astype(np.float64)
    return MetricsReport(cd, m_ae, m_s, metric_overlap(pred, t), per_patch, skipped)
