"""Patch-atlas surface fitting with surface-consistency and stitching losses."""

__version__ = "0.1.0"

from .fit import FitConfig, Fitter, evaluate, fit, run_ablation  # noqa: E402
from .losses import ConsistencyConfig, LossBreakdown, LossWeights  # noqa: E402
from .metrics import MetricsReport  # noqa: E402
from .patchmodel import Atlas, MarginSpec  # noqa: E402
from .shapes import ShapeSpec, gen_shape, normalize  # noqa: E402
from .spatial import GroundTruthCloud, NeighborConfig, PredictedCloud  # noqa: E402

__all__ = [
    "Atlas", "ConsistencyConfig", "FitConfig", "Fitter", "GroundTruthCloud", "LossBreakdown", "LossWeights",
    "MarginSpec", "MetricsReport", "NeighborConfig", "PredictedCloud", "ShapeSpec", "evaluate", "fit",
    "gen_shape", "normalize", "run_ablation",
]
