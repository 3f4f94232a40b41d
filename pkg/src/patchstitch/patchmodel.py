"""The patch atlas: K small MLP decoders from the unit square into 3D.

Parameter layout (flat float64, fixed order): for each of the four layers,
the stacked weights of all K patches ``(K, fan_in, fan_out)`` row-major,
followed by the stacked biases ``(K, fan_out)``; the latent code (``D``
values) comes last. Layer-major order lets every layer run as one batched
matmul across patches.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .spatial import PredictedCloud

N_LAYERS = 4
ACTIVATION = "softplus"
DEGENERATE_EPS = 1e-12
# pre-activation offset that keeps softplus in its linear regime to machine precision
_LINEAR_OFFSET = 40.0


class DegenerateJacobianError(ValueError):
    """The Jacobian columns are (nearly) parallel: the patch is collapsed here."""


@dataclass(frozen=True)
class FirstFundamentalForm:
    E: float
    F: float
    G: float


@dataclass(frozen=True)
class MarginSpec:
    r: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.r <= 0.5:
            raise ValueError("margin r must lie in [0, 0.5]")

    def contains(self, uv):
        uv = np.asarray(uv, dtype=np.float64)
        u, v = uv[..., 0], uv[..., 1]
        r = self.r
        return (u < r) | (u > 1.0 - r) | (v < r) | (v > 1.0 - r)


class Atlas:
    """K decoders ``f_k(c, u, v)`` with a shared optional latent code ``c``."""

    def __init__(self, n_patches, hidden=128, latent_dim=0, params=None):
        if n_patches < 1:
            raise ValueError("an atlas needs at least one patch")
        self.K = int(n_patches)
        self.H = int(hidden)
        self.D = int(latent_dim)
        self.sizes = [(2 + self.D, self.H), (self.H, self.H), (self.H, self.H), (self.H, 3)]
        self._layout = []
        off = 0
        for fi, fo in self.sizes:
            self._layout.append((off, (self.K, fi, fo)))
            off += self.K * fi * fo
            self._layout.append((off, (self.K, 1, fo)))
            off += self.K * fo
        self._latent_off = off
        self.n_params = off + self.D
        if params is None:
            params = np.zeros(self.n_params)
        params = np.array(params, dtype=np.float64).ravel()
        if params.size != self.n_params:
            raise ValueError(f"expected {self.n_params} parameters, got {params.size}")
        if not np.all(np.isfinite(params)):
            raise ValueError("non-finite parameters")
        self.params = params

    @property
    def architecture(self):
        return {"K": self.K, "H": self.H, "D": self.D, "activation": ACTIVATION}

    def copy(self):
        return Atlas(self.K, self.H, self.D, self.params.copy())

    @staticmethod
    def param_count(K, H, D=0):
        per_patch = (2 + D) * H + H + 2 * (H * H + H) + H * 3 + 3
        return K * per_patch + D

    def layers(self, params=None):
        """[(W, b), ...] views of ``params`` (array or Var) per layer."""
        p = self.params if params is None else params
        out = []
        for li in range(N_LAYERS):
            (wo, ws), (bo, bs) = self._layout[2 * li], self._layout[2 * li + 1]
            if isinstance(p, dc.Var):
                W = dc.reshape(p[wo:wo + int(np.prod(ws))], ws)
                b = dc.reshape(p[bo:bo + int(np.prod(bs))], bs)
            else:
                W = p[wo:wo + int(np.prod(ws))].reshape(ws)
                b = p[bo:bo + int(np.prod(bs))].reshape(bs)
            out.append((W, b))
        return out

    def latent(self, params=None):
        p = self.params if params is None else params
        if isinstance(p, dc.Var):
            return p[self._latent_off:]
        return p[self._latent_off:]

    def set_layer(self, layer, patch, W=None, b=None):
        """Overwrite one patch's weights/bias in place (fixture construction)."""
        (wo, ws), (bo, bs) = self._layout[2 * layer], self._layout[2 * layer + 1]
        Wv = self.params[wo:wo + int(np.prod(ws))].reshape(ws)
        bv = self.params[bo:bo + int(np.prod(bs))].reshape(bs)
        if W is not None:
            Wv[patch] = W
        if b is not None:
            bv[patch, 0] = b

    @classmethod
    def from_linear_charts(cls, charts, hidden=8, latent_dim=0):
        """Atlas whose patch k realises ``(u, v) -> A_k @ (u, v) + t_k``.

        ``charts`` is a list of ``(A (3x2), t (3,))``. Two hidden units carry
        ``u`` and ``v`` shifted deep into softplus' linear regime, so the map
        and its Jacobian are reproduced to rounding error.
        """
        if hidden < 2:
            raise ValueError("linear charts need hidden >= 2")
        atlas = cls(len(charts), hidden, latent_dim)
        c = _LINEAR_OFFSET
        for k, (A, t) in enumerate(charts):
            A = np.asarray(A, dtype=np.float64).reshape(3, 2)
            t = np.asarray(t, dtype=np.float64).reshape(3)
            W1 = np.zeros((2 + latent_dim, hidden))
            W1[0, 0] = 1.0
            W1[1, 1] = 1.0
            b1 = np.zeros(hidden)
            b1[:2] = c
            atlas.set_layer(0, k, W1, b1)
            for li in (1, 2):
                W = np.zeros((hidden, hidden))
                W[0, 0] = 1.0
                W[1, 1] = 1.0
                atlas.set_layer(li, k, W, np.zeros(hidden))
            W4 = np.zeros((hidden, 3))
            W4[0] = A[:, 0]
            W4[1] = A[:, 1]
            atlas.set_layer(3, k, W4, t - c * (A[:, 0] + A[:, 1]))
        return atlas


def glorot_init(K, H, D, rng):
    """Per-layer uniform weights in +-sqrt(6 / (fan_in + fan_out)).

    Hidden biases start at zero. Softplus outputs are positive, so with a
    zero head bias every patch would sit several units off the origin; the
    last-layer bias is instead set so each patch's UV centre (0.5, 0.5)
    decodes exactly to the origin.
    """
    atlas = Atlas(K, H, D)
    parts = []
    for fi, fo in atlas.sizes:
        lim = math.sqrt(6.0 / (fi + fo))
        parts.append(rng.uniform(-lim, lim, size=(K, fi, fo)).ravel())
        parts.append(np.zeros(K * fo))
    if D:
        parts.append(rng.normal(0.0, 1.0, size=D))
    atlas.params = np.concatenate(parts)
    centre, _ = forward(atlas, np.full((K, 1, 2), 0.5), jacobian=False)
    for k in range(K):
        atlas.set_layer(N_LAYERS - 1, k, b=-centre.value[k, 0])
    return atlas


def mlp(layers, x):
    """Four affine layers, softplus on the first three; Var or Dual input."""
    h = x
    for li, (W, b) in enumerate(layers):
        h = dc.affine(h, W, b)
        if li < N_LAYERS - 1:
            h = dc.softplus(h)
    return h


def _inputs(atlas, uv, params):
    """Stack (u, v[, c]) inputs: ``uv`` is (K, M, 2) -> (K, M, 2 + D)."""
    uv = np.asarray(uv, dtype=np.float64)
    if atlas.D == 0:
        return dc.const(uv)
    c = atlas.latent(params)
    c = dc.reshape(c, (1, 1, atlas.D)) if isinstance(c, dc.Var) else dc.const(c.reshape(1, 1, -1))
    zeros = dc.const(np.zeros(uv.shape[:-1] + (atlas.D,)))
    return dc.concat([dc.const(uv), dc.add(zeros, c)], axis=-1)


def forward(atlas, uv, params=None, jacobian=True):
    """Decode a per-patch UV batch.

    ``uv`` has shape (K, M, 2). Returns ``(points, tangents)`` where ``points``
    is a (K, M, 3) Var and ``tangents`` a (2, K, M, 3) Var holding the
    Jacobian columns d/du and d/dv (``None`` without ``jacobian``).
    """
    p = atlas.params if params is None else params
    layers = atlas.layers(p)
    x = _inputs(atlas, uv, p)
    if not jacobian:
        return mlp(layers, x), None
    uv = np.asarray(uv)
    seed = np.zeros((2,) + uv.shape[:-1] + (2 + atlas.D,))
    seed[0, ..., 0] = 1.0
    seed[1, ..., 1] = 1.0
    return dc.jvp(lambda d: mlp(layers, d), x, dc.const(seed))


def predict(atlas, uv, params=None, jacobian=True):
    """Decode ``uv`` (K, M, 2) into a :class:`PredictedCloud` (patch-major)."""
    pts, tan = forward(atlas, uv, params, jacobian)
    K, M = pts.value.shape[:2]
    P = K * M
    ids = np.repeat(np.arange(K), M)
    flat_uv = np.asarray(uv, dtype=np.float64).reshape(P, 2)
    if tan is None:
        return PredictedCloud(dc.reshape(pts, (P, 3)), ids, atlas.K, uv=flat_uv)
    ju = dc.reshape(tan[0], (P, 3))
    jv = dc.reshape(tan[1], (P, 3))
    return PredictedCloud(dc.reshape(pts, (P, 3)), ids, atlas.K, uv=flat_uv, ju=ju, jv=jv)


def _single_patch(atlas, patch_id):
    if not 0 <= patch_id < atlas.K:
        raise IndexError(f"patch id {patch_id} out of range [0, {atlas.K})")
    layers = [(W[patch_id:patch_id + 1], b[patch_id:patch_id + 1]) for W, b in atlas.layers()]
    latent = atlas.latent()

    def mapping(x):
        if atlas.D:
            if isinstance(x, dc.Dual):
                P = x.primal.value
                zeros_t = np.zeros(x.tangent.value.shape[:-1] + (atlas.D,))
                x = dc.Dual(np.concatenate([P, np.broadcast_to(latent, P.shape[:-1] + (atlas.D,))], -1),
                            np.concatenate([x.tangent.value, zeros_t], -1))
            else:
                xv = dc.as_var(x).value
                x = np.concatenate([xv, np.broadcast_to(latent, xv.shape[:-1] + (atlas.D,))], -1)
        return mlp(layers, x)

    return mapping


def _as_batch(uv):
    uv = np.asarray(uv, dtype=np.float64)
    single = uv.ndim == 1
    return uv.reshape(1, -1, 2), single


def decode(atlas, patch_id, uv):
    """3D point(s) of patch ``patch_id`` at ``uv`` (a 2-vector or (n, 2))."""
    x, single = _as_batch(uv)
    p = dc.as_var(_single_patch(atlas, patch_id)(x)).value[0]
    return p[0] if single else p


def jacobian(atlas, patch_id, uv):
    """3x2 Jacobian (columns d/du, d/dv) at ``uv``; stacks for (n, 2) input."""
    x, single = _as_batch(uv)
    f = _single_patch(atlas, patch_id)
    ju = dc.directional_jacobian(f, x, (1.0, 0.0))[0]
    jv = dc.directional_jacobian(f, x, (0.0, 1.0))[0]
    J = np.stack([ju, jv], axis=-1)
    return J[0] if single else J


def fundamental_form(jac):
    """E = |J_u|^2, F = J_u . J_v, G = |J_v|^2 for a 3x2 (or stacked) Jacobian."""
    J = np.asarray(jac, dtype=np.float64)
    ju, jv = J[..., 0], J[..., 1]
    E = (ju * ju).sum(-1)
    F = (ju * jv).sum(-1)
    G = (jv * jv).sum(-1)
    if J.ndim == 2:
        return FirstFundamentalForm(float(E), float(F), float(G))
    return FirstFundamentalForm(E, F, G)


def analytic_normal(jac):
    """Unit ``J_u x J_v``; raises :class:`DegenerateJacobianError` if collapsed."""
    J = np.asarray(jac, dtype=np.float64)
    c = np.cross(J[..., 0], J[..., 1])
    n = np.linalg.norm(c, axis=-1)
    if np.any(n <= DEGENERATE_EPS):
        raise DegenerateJacobianError("Jacobian columns are parallel (collapsed or creased patch)")
    return c / n[..., None]


def patch_area(atlas, patch_id, uv_samples):
    """Monte-Carlo area: mean of ``sqrt(max(0, EG - F^2))`` over the samples."""
    uv = np.asarray(uv_samples, dtype=np.float64).reshape(-1, 2)
    if uv.shape[0] < 1:
        raise ValueError("need at least one UV sample")
    f = fundamental_form(jacobian(atlas, patch_id, uv))
    return float(np.mean(np.sqrt(np.maximum(0.0, f.E * f.G - f.F * f.F))))


def sample_uv(count, strategy="uniform-random", rng=None):
    """UV samples in the unit square.

    ``regular-grid`` returns the ``ceil(sqrt(count))**2`` lattice including
    both boundaries, ``u`` varying slowest.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if strategy == "uniform-random":
        if rng is None:
            raise ValueError("uniform-random sampling needs an rng")
        return rng.random((count, 2))
    if strategy == "regular-grid":
        side = math.ceil(math.sqrt(count))
        t = np.linspace(0.0, 1.0, side) if side > 1 else np.zeros(1)
        uu, vv = np.meshgrid(t, t, indexing="ij")
        return np.stack([uu.ravel(), vv.ravel()], axis=-1)
    raise ValueError(f"unknown sampling strategy {strategy!r}")


def sample_margin(spec, count, rng):
    """Uniform samples over the UV frame ``u<r | u>1-r | v<r | v>1-r``.

    One of the frame's four rectangles is picked with probability
    proportional to its area, then a point is drawn uniformly inside it.
    """
    r = spec.r
    if r <= 0.0:
        raise ValueError("margin width must be positive")
    if count < 1:
        raise ValueError("count must be >= 1")
    mid = 1.0 - 2.0 * r
    areas = np.array([r, r, r * mid, r * mid])
    pick = rng.random(count) * areas.sum()
    which = np.searchsorted(np.cumsum(areas), pick, side="right")
    which = np.minimum(which, 3)
    a = rng.random(count)
    b = rng.random(count)
    u = np.empty(count)
    v = np.empty(count)
    s = which == 0  # bottom strip
    u[s], v[s] = a[s], r * b[s]
    s = which == 1  # top strip
    u[s], v[s] = a[s], 1.0 - r * b[s]
    s = which == 2  # left strip
    u[s], v[s] = r * a[s], r + mid * b[s]
    s = which == 3  # right strip
    u[s], v[s] = 1.0 - r * a[s], r + mid * b[s]
    return np.stack([u, v], axis=-1)
