"""Optimisation loop: pretrain on the distortion-regularised objective, then
switch on the variant's consistency and stitching terms."""

import copy
import logging
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import diffcore as dc
from .losses import ConsistencyConfig, LossBreakdown, LossWeights, compute_terms, total_loss
from .metrics import EVAL_GRID, METRIC_MARGIN, OVERLAP_T, evaluate_atlas
from .patchmodel import MarginSpec, glorot_init, predict, sample_margin
from .spatial import NeighborConfig, NeighborIndex

log = logging.getLogger(__name__)

VARIANTS = ("dsp", "aprox", "analyt", "stitch", "analyt+stitch", "analyt-area", "analyt+stitch-area")

# variant -> (surface consistency on, stitching on, overlap term on, normal mode)
_VARIANT_TABLE = {
    "dsp": (False, False, True, "analytic"),
    "aprox": (True, False, True, "approximate"),
    "analyt": (True, False, True, "analytic"),
    "stitch": (False, True, True, "analytic"),
    "analyt+stitch": (True, True, True, "analytic"),
    "analyt-area": (True, False, False, "analytic"),
    "analyt+stitch-area": (True, True, False, "analytic"),
}

DIVERGENCE_FACTOR = 1e3
DIVERGENCE_PATIENCE = 100


class FitError(RuntimeError):
    pass


class FitDivergedError(FitError):
    pass


class NonFiniteGradientError(FitError):
    def __init__(self, term=None):
        self.term = term
        where = f" (loss term {term!r})" if term else ""
        super().__init__(f"non-finite gradient{where}")


@dataclass(frozen=True)
class FitConfig:
    K: int = 25
    M: int = 100
    margin_count: int | None = None
    hidden: int = 128
    latent_dim: int = 0
    total_iters: int = 3000
    pretrain_iters: int | None = None
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weights: LossWeights = field(default_factory=LossWeights)
    consistency: ConsistencyConfig = field(default_factory=ConsistencyConfig)
    margin: MarginSpec = field(default_factory=MarginSpec)
    eval_every: int = 500
    seed: int = 0
    variant: str = "analyt"
    rebuild_every: int = 1
    eval_grid: int = EVAL_GRID
    overlap_t: float = OVERLAP_T
    metric_margin: float = METRIC_MARGIN
    diagnostics: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {', '.join(VARIANTS)}")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.pretrain_iters is not None and not 0 <= self.pretrain_iters <= self.total_iters:
            raise ValueError("pretrain_iters must lie in [0, total_iters]")
        if self.M < max(self.consistency.neighbor.n + 1, 4):
            raise ValueError("M must be >= max(n + 1, 4)")
        if self.K < 2 and self.phase_weights("finetune").alpha_st > 0:
            raise ValueError("stitching needs K >= 2")
        if self.rebuild_every < 1 or self.eval_every < 1:
            raise ValueError("rebuild_every and eval_every must be >= 1")

    @property
    def n_pretrain(self):
        return self.total_iters // 2 if self.pretrain_iters is None else self.pretrain_iters

    @property
    def n_margin(self):
        return self.M if self.margin_count is None else self.margin_count

    def phase_weights(self, phase):
        w = self.weights
        if phase == "pretrain":
            return w.replace(alpha_sc=0.0, alpha_st=0.0)
        sc, st, ol, _ = _VARIANT_TABLE[self.variant]
        return w.replace(alpha_sc=w.alpha_sc if sc else 0.0, alpha_st=w.alpha_st if st else 0.0,
                         alpha_ol=w.alpha_ol if ol else 0.0)

    def phase_consistency(self, phase):
        mode = _VARIANT_TABLE[self.variant][3]
        return replace(self.consistency, normal_mode=mode)

    def with_variant(self, variant):
        return replace(self, variant=variant)

    def to_dict(self):
        return asdict(self)


@dataclass
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n), 0)


def optimizer_step(state, params, grad, lr, beta1=0.9, beta2=0.999, eps=1e-8, term=None):
    """One bias-corrected adaptive-moment update; returns ``(params, state)``."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != params.shape or state.m.shape != params.shape:
        raise ValueError("parameter, gradient and optimizer state shapes differ")
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradientError(term)
    t = state.step + 1
    m = beta1 * state.m + (1.0 - beta1) * grad
    v = beta2 * state.v + (1.0 - beta2) * grad * grad
    mhat = m / (1.0 - beta1 ** t)
    vhat = v / (1.0 - beta2 ** t)
    return params - lr * mhat / (np.sqrt(vhat) + eps), OptimizerState(m, v, t)


def init_atlas(config, rng):
    return glorot_init(config.K, config.hidden, config.latent_dim, rng)


@dataclass
class HistoryRecord:
    iteration: int
    losses: LossBreakdown
    wall: float = 0.0


@dataclass
class FitState:
    atlas: object
    opt: OptimizerState
    rng: np.random.Generator
    iteration: int = 0
    history: list = field(default_factory=list)
    reports: list = field(default_factory=list)
    ref_total: float | None = None
    over_count: int = 0
    diagnostics: dict = field(default_factory=dict)
    _batch: tuple | None = None

    def clone(self):
        return copy.deepcopy(self)


@dataclass
class FitResult:
    atlas: object
    history: list
    reports: list
    state: FitState

    @property
    def final_report(self):
        return self.reports[-1][1]


class Fitter:
    """Runs iterations of one configuration against one target cloud."""

    def __init__(self, gt, config):
        self.gt = gt
        self.config = config
        self.gt_index = NeighborIndex(gt.points)

    def init_state(self, atlas=None):
        rng = np.random.default_rng(self.config.seed)
        if atlas is None:
            atlas = init_atlas(self.config, rng)
        return FitState(atlas, OptimizerState.zeros(atlas.n_params), rng)

    def evaluate(self, atlas):
        c = self.config
        return evaluate_atlas(atlas, self.gt, c.eval_grid, c.overlap_t, c.metric_margin,
                              c.consistency.neighbor, self.gt_index)

    def _objective(self, atlas, uv, muv, weights, cons, sel, diagnostics):
        gt = self.gt

        def objective(p):
            cloud = predict(atlas, uv, p)
            margins = None
            if muv is not None:
                margins = predict(atlas, muv, p, jacobian=False)
            terms = compute_terms(cloud, gt, weights, cons, margins, self.gt_index, sel, diagnostics)
            total, bd = total_loss(terms, weights)
            return total, (bd, terms)

        return objective

    def _blame(self, atlas, uv, muv, weights, cons, sel):
        """Name the first loss term whose gradient is non-finite.

        Each term is evaluated on its own (Chamfer always rides along, so it
        is checked first) so an overflow in one term cannot mask another.
        """
        zero = LossWeights(0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
        alpha = {"l_E": "alpha_E", "l_G": "alpha_G", "l_sk": "alpha_sk", "l_ol": "alpha_ol",
                 "l_sc": "alpha_sc", "l_st": "alpha_st"}
        for name in LossBreakdown.FIELDS[:-1]:
            if name == "chd":
                w = zero
            elif getattr(weights, alpha[name]) > 0:
                w = zero.replace(**{alpha[name]: 1.0})
            else:
                continue

            def single(p, name=name, w=w):
                cloud = predict(atlas, uv, p)
                margins = predict(atlas, muv, p, jacobian=False) if name == "l_st" else None
                return compute_terms(cloud, self.gt, w, cons, margins, self.gt_index, sel)[name]

            try:
                _, g = dc.value_and_grad(single, atlas.params)
            except dc.NonFiniteError:
                return name
            if not np.all(np.isfinite(g)):
                return name
        return None

    def step(self, state):
        c = self.config
        it = state.iteration + 1
        phase = "pretrain" if it <= c.n_pretrain else "finetune"
        weights = c.phase_weights(phase)
        cons = c.phase_consistency(phase)
        if state._batch is None or (it - 1) % c.rebuild_every == 0 or state._batch[0] != phase:
            uv = state.rng.random((c.K, c.M, 2))
            muv = None
            if weights.alpha_st > 0:
                muv = sample_margin(c.margin, c.K * c.n_margin, state.rng).reshape(c.K, c.n_margin, 2)
            state._batch = (phase, uv, muv, {})
        _, uv, muv, sel = state._batch
        diag = {}
        objective = self._objective(state.atlas, uv, muv, weights, cons, sel, diag)
        t0 = time.perf_counter()
        try:
            (total, (bd, _)), grad = dc.value_and_grad(objective, state.atlas.params, has_aux=True)
        except dc.NonFiniteError as exc:
            term = self._blame(state.atlas, uv, muv, weights, cons, sel) if c.diagnostics else None
            raise NonFiniteGradientError(term) from exc
        params, state.opt = optimizer_step(state.opt, state.atlas.params, grad, c.learning_rate,
                                           c.beta1, c.beta2, c.eps)
        state.atlas.params = params
        state.iteration = it
        state.history.append(HistoryRecord(it, bd, time.perf_counter() - t0))
        if diag:
            state.diagnostics = diag
        self._guard(state, total, phase)
        return bd

    def _guard(self, state, total, phase):
        c = self.config
        if state.ref_total is None and (state.iteration == c.n_pretrain or c.n_pretrain == 0):
            state.ref_total = total
            return
        if state.ref_total is None or phase != "finetune":
            return
        if total > DIVERGENCE_FACTOR * state.ref_total:
            state.over_count += 1
            if state.over_count >= DIVERGENCE_PATIENCE:
                raise FitDivergedError(
                    f"total loss {total:.3g} above {DIVERGENCE_FACTOR:g}x the post-pretraining value "
                    f"{state.ref_total:.3g} for {DIVERGENCE_PATIENCE} iterations (iteration {state.iteration})")
        else:
            state.over_count = 0

    def run(self, state, until=None, callback=None):
        """Iterate until ``state.iteration == until`` (default: the full budget)."""
        c = self.config
        until = c.total_iters if until is None else until
        if not state.reports:
            state.reports.append((state.iteration, self.evaluate(state.atlas)))
        while state.iteration < until:
            bd = self.step(state)
            if callback is not None:
                callback(state.iteration, bd)
            if state.iteration % c.eval_every == 0 or state.iteration == c.total_iters:
                if state.reports[-1][0] != state.iteration:
                    state.reports.append((state.iteration, self.evaluate(state.atlas)))
        return FitResult(state.atlas, state.history, state.reports, state)


def fit(gt, config, atlas=None, callback=None):
    """Full two-phase fit; returns :class:`FitResult`."""
    f = Fitter(gt, config)
    return f.run(f.init_state(atlas), callback=callback)


def evaluate(atlas, gt, config=None):
    config = config or FitConfig(K=atlas.K, hidden=atlas.H, latent_dim=atlas.D)
    return Fitter(gt, config).evaluate(atlas)


def pretrain(gt, config, atlas=None, callback=None):
    """Run only the shared pretraining phase; returns the state."""
    f = Fitter(gt, config)
    state = f.init_state(atlas)
    f.run(state, until=config.n_pretrain, callback=callback)
    return state


def finetune(gt, config, pretrained, callback=None):
    """Continue a (copied) pretrained state under ``config``'s variant."""
    f = Fitter(gt, config)
    state = pretrained.clone()
    state._batch = None
    return f.run(state, callback=callback)


def run_ablation(gt, config, variants, callback=None):
    """Fit every variant from one shared pretrained state.

    Returns ``{variant: FitResult}``; each result is identical to a direct
    :func:`fit` with that variant and the same seed.
    """
    for v in variants:
        if v not in VARIANTS:
            raise ValueError(f"unknown variant {v!r}")
    base = pretrain(gt, config, callback=callback)
    return {v: finetune(gt, config.with_variant(v), base, callback=callback) for v in variants}
