"""Array-level reverse-mode differentiation with forward-mode Jacobian columns.

Computations are built from registered primitives (:data:`PRIMITIVES`).
Calling a primitive while a tape is active records a node; :func:`value_and_grad`
replays the tape backwards in exact reverse creation order, so gradient
accumulation is deterministic.

Forward-mode derivatives are expressed as ordinary primitive calls on a
:class:`Dual` (primal, tangent) pair. The tangent path is therefore itself
differentiable, which is what lets losses built on Jacobians (metric tensor,
analytic normals) be differentiated with respect to network weights.

Discrete selections (nearest-neighbour indices and the like) are passed to
:func:`take` as plain integer arrays; gradients flow through the selected
values, never through the choice.
"""

import threading

import numpy as np

from . import kernels

EIGEN_GAP_MIN = 1e-6


class DiffError(RuntimeError):
    pass


class NonFiniteError(DiffError):
    """A primitive produced NaN or Inf."""

    def __init__(self, primitive, phase="forward"):
        self.primitive = primitive
        self.phase = phase
        super().__init__(f"non-finite values in {phase} pass of primitive {primitive!r}")


class UnregisteredPrimitiveError(DiffError):
    pass


PRIMITIVES = {}

_state = threading.local()


def _tape():
    return getattr(_state, "tape", None)


def primitive(name):
    """Register ``fn(*values, **kw) -> (out, vjp[, aux])`` under ``name``."""

    def deco(fn):
        PRIMITIVES[name] = fn
        return fn

    return deco


class Var:
    """A node holding a float64 array and (optionally) its tape linkage."""

    __slots__ = ("value", "parents", "vjp", "op", "grad", "requires_grad", "aux")
    __array_priority__ = 100

    def __init__(self, value, requires_grad=False):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = ()
        self.vjp = None
        self.op = None
        self.grad = None
        self.requires_grad = requires_grad
        self.aux = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __len__(self):
        return len(self.value)

    def __repr__(self):
        return f"Var(op={self.op}, shape={self.value.shape})"

    def item(self):
        return float(self.value)

    def __float__(self):
        return float(self.value)

    def __add__(self, o):
        return apply("add", self, o)

    def __radd__(self, o):
        return apply("add", o, self)

    def __sub__(self, o):
        return apply("sub", self, o)

    def __rsub__(self, o):
        return apply("sub", o, self)

    def __mul__(self, o):
        return apply("mul", self, o)

    def __rmul__(self, o):
        return apply("mul", o, self)

    def __truediv__(self, o):
        return apply("div", self, o)

    def __rtruediv__(self, o):
        return apply("div", o, self)

    def __neg__(self):
        return apply("neg", self)

    def __pow__(self, p):
        if p != 2:
            raise ValueError("only squaring is supported")
        return apply("square", self)

    def __matmul__(self, o):
        return apply("matmul", self, o)

    def __getitem__(self, key):
        return apply("getitem", self, key=key)

    @property
    def T(self):
        return apply("transpose", self, axes=None)


def as_var(x):
    return x if isinstance(x, Var) else Var(x)


def const(x):
    """Wrap a value as a tape constant (also detaches a Var)."""
    return Var(x.value if isinstance(x, Var) else x)


detach = const


def apply(name, *inputs, **kw):
    """Evaluate primitive ``name`` and record it on the active tape."""
    try:
        fn = PRIMITIVES[name]
    except KeyError:
        raise UnregisteredPrimitiveError(f"primitive {name!r} is not registered") from None
    ins = [as_var(x) for x in inputs]
    res = fn(*[v.value for v in ins], **kw)
    out_value, vjp = res[0], res[1]
    out = Var(out_value)
    if len(res) > 2:
        out.aux = res[2]
    if not np.all(np.isfinite(out.value)):
        raise NonFiniteError(name)
    tape = _tape()
    if tape is not None and any(v.requires_grad for v in ins):
        out.parents = tuple(ins)
        out.vjp = vjp
        out.op = name
        out.requires_grad = True
        tape.append(out)
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


@primitive("add")
def _add(a, b):
    return a + b, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))


@primitive("sub")
def _sub(a, b):
    return a - b, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))


@primitive("mul")
def _mul(a, b):
    return a * b, lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape))


@primitive("div")
def _div(a, b):
    out = a / b
    return out, lambda g: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * out / b, b.shape))


@primitive("neg")
def _neg(a):
    return -a, lambda g: (-g,)


@primitive("square")
def _square(a):
    return a * a, lambda g: (2.0 * a * g,)


@primitive("sqrt0")
def _sqrt0(a):
    out = np.sqrt(np.maximum(a, 0.0))
    safe = np.where(out > 0.0, out, 1.0)
    return out, lambda g: (np.where(out > 0.0, 0.5 * g / safe, 0.0),)


@primitive("hinge")
def _hinge(a):
    return np.maximum(a, 0.0), lambda g: (np.where(a > 0.0, g, 0.0),)


@primitive("softplus")
def _softplus(a):
    return np.logaddexp(0.0, a), lambda g: (g * _sigmoid_value(a),)


def _sigmoid_value(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


@primitive("sigmoid")
def _sigmoid(a):
    s = _sigmoid_value(a)
    return s, lambda g: (g * s * (1.0 - s),)


# ---------------------------------------------------------------------------
# reductions and structure
# ---------------------------------------------------------------------------


@primitive("sum")
def _sum(a, axis=None, keepdims=False):
    out = a.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return out, vjp


@primitive("reshape")
def _reshape(a, shape):
    return a.reshape(shape), lambda g: (g.reshape(a.shape),)


@primitive("transpose")
def _transpose(a, axes=None):
    out = np.transpose(a, axes)
    inv = None if axes is None else np.argsort(axes)
    return out, lambda g: (np.transpose(g, inv),)


@primitive("swaplast")
def _swaplast(a):
    return np.swapaxes(a, -1, -2), lambda g: (np.swapaxes(g, -1, -2),)


@primitive("getitem")
def _getitem(a, key):
    out = a[key]

    def vjp(g):
        full = np.zeros_like(a)
        full[key] = g
        return (full,)

    return np.array(out), vjp


@primitive("take")
def _take(a, idx):
    """Rows ``a[idx]`` for an integer index array of any shape (detached)."""
    idx = np.asarray(idx)
    out = a[idx]

    def vjp(g):
        full = np.zeros_like(a)
        np.add.at(full, idx, g)
        return (full,)

    return out, vjp


@primitive("concat")
def _concat(*arrays, axis=0):
    out = np.concatenate(arrays, axis=axis)
    bounds = np.cumsum([x.shape[axis] for x in arrays])[:-1]
    return out, lambda g: tuple(np.split(g, bounds, axis=axis))


@primitive("stack")
def _stack(*arrays, axis=0):
    out = np.stack(arrays, axis=axis)
    return out, lambda g: tuple(np.moveaxis(g, axis, 0))


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


@primitive("matmul")
def _matmul(a, b):
    out = a @ b
    # promote vectors to matrices so one backward rule covers every case
    a2 = a[None, :] if a.ndim == 1 else a
    b2 = b[:, None] if b.ndim == 1 else b

    def vjp(g):
        if a.ndim == 1:
            g = g[..., None, :]
        if b.ndim == 1:
            g = g[..., None]
        ga = g @ np.swapaxes(b2, -1, -2)
        gb = np.swapaxes(a2, -1, -2) @ g
        if a.ndim == 1:
            ga = ga.reshape(-1, a.shape[0]).sum(axis=0)
        if b.ndim == 1:
            gb = gb.reshape(-1, b.shape[0]).sum(axis=0)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return out, vjp


@primitive("affine")
def _affine(x, W, b):
    """Batched ``x @ W + b``; ``b`` broadcasts over the row axis."""
    out = x @ W + b

    def vjp(g):
        gx = g @ np.swapaxes(W, -1, -2)
        gW = np.swapaxes(x, -1, -2) @ g
        return _unbroadcast(gx, x.shape), _unbroadcast(gW, W.shape), _unbroadcast(g, b.shape)

    return out, vjp


@primitive("dot")
def _dot(a, b):
    """Inner product over the last axis (three components, fixed order)."""
    out = (a[..., 0] * b[..., 0] + a[..., 1] * b[..., 1]) + a[..., 2] * b[..., 2]

    def vjp(g):
        g = g[..., None]
        return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)

    return out, vjp


def _cross_raw(a, b):
    return np.stack([a[..., 1] * b[..., 2] - a[..., 2] * b[..., 1],
                     a[..., 2] * b[..., 0] - a[..., 0] * b[..., 2],
                     a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]], axis=-1)


@primitive("cross")
def _cross(a, b):
    # d(a x b) = da x b + a x db  =>  grad_a = b x g, grad_b = g x a
    return _cross_raw(a, b), lambda g: (_unbroadcast(_cross_raw(b, g), a.shape),
                                        _unbroadcast(_cross_raw(g, a), b.shape))


@primitive("norm")
def _norm(a):
    """Euclidean norm over the last axis."""
    out = np.sqrt((a[..., 0] * a[..., 0] + a[..., 1] * a[..., 1]) + a[..., 2] * a[..., 2])
    safe = np.where(out > 0.0, out, 1.0)
    return out, lambda g: (np.where(out[..., None] > 0.0, g[..., None] * a / safe[..., None], 0.0),)


@primitive("sym3_min_eigvec")
def _sym3_min_eigvec(C, gap_min=EIGEN_GAP_MIN):
    """Unit eigenvector for the smallest eigenvalue of symmetric 3x3 matrices.

    Backward uses first-order eigenvector perturbation,
    ``dv0 = sum_{j>0} v_j (v_j^T dC v0) / (l0 - l_j)``; rows whose gap
    ``l1 - l0`` is below ``gap_min`` get a zero gradient.
    aux: dict with eigenvalues ``w`` (n, 3), ``gap`` (n,) and ``vectors``.
    """
    shape = C.shape
    w, V = kernels.sym3_eigh(C.reshape(-1, 3, 3))
    v0 = V[:, :, 0]
    gap = w[:, 1] - w[:, 0]
    ok = gap >= gap_min

    def vjp(g):
        g = g.reshape(-1, 3)
        gC = np.zeros((g.shape[0], 3, 3))
        for j in (1, 2):
            vj = V[:, :, j]
            den = np.where(ok, w[:, 0] - w[:, j], 1.0)
            coef = np.where(ok, (vj * g).sum(-1) / den, 0.0)
            gC += coef[:, None, None] * vj[:, :, None] * v0[:, None, :]
        gC = 0.5 * (gC + np.swapaxes(gC, 1, 2))
        return (gC.reshape(shape),)

    aux = {"w": w.reshape(shape[:-2] + (3,)), "gap": gap.reshape(shape[:-2]),
           "vectors": V.reshape(shape)}
    return v0.reshape(shape[:-1]), vjp, aux


# ---------------------------------------------------------------------------
# functional front end
# ---------------------------------------------------------------------------


def add(a, b):
    return apply("add", a, b)


def mul(a, b):
    return apply("mul", a, b)


def square(a):
    return apply("square", a)


def sqrt0(a):
    """``sqrt(max(a, 0))`` with zero gradient at the clamp."""
    return apply("sqrt0", a)


def hinge(a):
    return apply("hinge", a)


def vsum(a, axis=None, keepdims=False):
    return apply("sum", a, axis=axis, keepdims=keepdims)


def mean(a, axis=None):
    a = as_var(a)
    n = a.value.size if axis is None else a.value.shape[axis]
    return apply("sum", a, axis=axis) / float(n)


def reshape(a, shape):
    return apply("reshape", a, shape=tuple(shape))


def transpose(a, axes=None):
    return apply("transpose", a, axes=axes)


def swaplast(a):
    return apply("swaplast", a)


def take(a, idx):
    return apply("take", a, idx=np.asarray(idx))


def concat(items, axis=0):
    return apply("concat", *items, axis=axis)


def stack(items, axis=0):
    return apply("stack", *items, axis=axis)


def matmul(a, b):
    return apply("matmul", a, b)


def dot(a, b):
    return apply("dot", a, b)


def cross(a, b):
    return apply("cross", a, b)


def norm(a):
    return apply("norm", a)


def sym3_min_eigvec(C, gap_min=EIGEN_GAP_MIN):
    return apply("sym3_min_eigvec", C, gap_min=gap_min)


def sigmoid(a):
    return apply("sigmoid", a)


class Dual:
    """Forward-mode pair; ``tangent`` may carry extra leading direction axes."""

    __slots__ = ("primal", "tangent")

    def __init__(self, primal, tangent):
        self.primal = as_var(primal)
        self.tangent = as_var(tangent)


def affine(x, W, b):
    if isinstance(x, Dual):
        return Dual(apply("affine", x.primal, W, b), apply("matmul", x.tangent, W))
    return apply("affine", x, W, b)


def softplus(x):
    if isinstance(x, Dual):
        return Dual(apply("softplus", x.primal), apply("mul", apply("sigmoid", x.primal), x.tangent))
    return apply("softplus", x)


def jvp(fn, primal, tangent):
    """Push ``tangent`` through ``fn`` at ``primal``; returns (out, out_tangent)."""
    out = fn(Dual(primal, tangent))
    return out.primal, out.tangent


def directional_jacobian(mapping, uv, direction):
    """Exact derivative of ``mapping`` at ``uv`` along ``direction``.

    ``mapping`` must be written with :func:`affine` / :func:`softplus` (or any
    other Dual-aware calls). ``uv`` may be a single 2-vector or a stack of them.
    """
    uv = np.asarray(uv, dtype=np.float64)
    direction = np.broadcast_to(np.asarray(direction, dtype=np.float64), uv.shape)
    _, t = jvp(mapping, uv, direction)
    return t.value


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------


class _TapeScope:
    def __enter__(self):
        self.prev = _tape()
        self.tape = []
        _state.tape = self.tape
        return self.tape

    def __exit__(self, *exc):
        _state.tape = self.prev
        return False


def value_and_grad(objective, params, has_aux=False):
    """Evaluate ``objective(params_var)`` and its gradient w.r.t. ``params``.

    ``params`` is a flat float64 array; ``objective`` receives it as a
    :class:`Var` and must return a scalar :class:`Var` (or ``(Var, aux)``
    when ``has_aux``). Returns ``(value, grad)`` or ``((value, aux), grad)``.
    """
    x = Var(np.array(params, dtype=np.float64), requires_grad=True)
    with _TapeScope() as tape:
        res = objective(x)
    out, aux = (res if has_aux else (res, None))
    out = as_var(out)
    if out.value.size != 1:
        raise DiffError(f"objective must be scalar, got shape {out.value.shape}")
    value = float(out.value)
    if not out.requires_grad:
        grad = np.zeros_like(x.value)
    else:
        out.grad = np.ones_like(out.value)
        for node in reversed(tape):
            g = node.grad
            if g is None:
                continue
            pgrads = node.vjp(g)
            for p, pg in zip(node.parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                if not np.all(np.isfinite(pg)):
                    raise NonFiniteError(node.op, "backward")
                p.grad = pg if p.grad is None else p.grad + pg
            node.grad = None
        grad = x.grad if x.grad is not None else np.zeros_like(x.value)
    return ((value, aux), grad) if has_aux else (value, grad)


def evaluate(objective, params):
    """Scalar value of ``objective`` without recording a tape."""
    out = objective(Var(np.array(params, dtype=np.float64)))
    if isinstance(out, tuple):
        out = out[0]
    v = float(as_var(out).value)
    if not np.isfinite(v):
        raise NonFiniteError("objective")
    return v


def finite_diff_grad(objective, params, h=1e-5):
    """Central differences ``(f(x + h e_i) - f(x - h e_i)) / 2h`` per coordinate."""
    if not h > 0:
        raise ValueError("step size must be positive")
    x = np.array(params, dtype=np.float64).ravel()
    g = np.empty_like(x)
    for i in range(x.size):
        orig = x[i]
        x[i] = orig + h
        fp = evaluate(objective, x)
        x[i] = orig - h
        fm = evaluate(objective, x)
        x[i] = orig
        g[i] = (fp - fm) / (2.0 * h)
    return g
