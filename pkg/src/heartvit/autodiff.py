"""Tape-based reverse-mode differentiation over float64 numpy arrays.

Every public op accepts plain arrays or :class:`Var` handles.  When no
argument is a ``Var`` the op simply evaluates with numpy, so the same model
code serves fast inference and differentiation.  When at least one argument
is a ``Var`` the op is recorded on that variable's :class:`Tape`.

Curvature is obtained from first-order gradients only: :func:`hvp` takes a
symmetric difference of two gradients along the probe direction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from .errors import ContractError, NumericError, SizeError

EPS = np.finfo(np.float64).eps
HESSIAN_ORACLE_MAX_DIM = 512


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator; identical streams on every platform."""
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


def truncated_normal(rng: np.random.Generator, shape, std: float = 0.02, bound: float = 2.0):
    """Normal draws with resampling outside ``bound`` standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return out * std


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------


@dataclass
class Node:
    op: str
    args: tuple  # node indices (int) or constant arrays
    value: np.ndarray
    prim: "Primitive | None" = None
    params: dict = field(default_factory=dict)


class Tape:
    """Ordered record of primitive applications.

    Nodes are appended as ops execute, so inputs always precede their
    consumers.  A tape is single-threaded; build one per differentiation.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def var(self, value, name: str = "input") -> "Var":
        value = np.array(value, dtype=np.float64)
        self.nodes.append(Node(op=name, args=(), value=value))
        return Var(self, len(self.nodes) - 1)

    def _record(self, prim, args, out, params) -> "Var":
        # constants are stored as arrays so a Python int is never mistaken for a node index
        ref = tuple(a.index if isinstance(a, Var) else np.asarray(a) for a in args)
        self.nodes.append(Node(op=prim.name, args=ref, value=out, prim=prim, params=params))
        return Var(self, len(self.nodes) - 1)

    def replay(self) -> list[np.ndarray]:
        """Re-evaluate every node from the leaf values; returns fresh values."""
        values: list[np.ndarray] = []
        for node in self.nodes:
            if node.prim is None:
                values.append(node.value.copy())
                continue
            vals = [values[a] if isinstance(a, int) else a for a in node.args]
            values.append(node.prim.fwd(*vals, **node.params))
        return values

    def first_nonfinite(self) -> int | None:
        for i, node in enumerate(self.nodes):
            if not np.all(np.isfinite(node.value)):
                return i
        return None

    def backward(self, out: "Var", wrt: Sequence["Var"]) -> list[np.ndarray]:
        if out.tape is not self:
            raise ContractError("output variable belongs to another tape")
        grads: dict[int, np.ndarray] = {out.index: np.ones_like(out.value)}
        wanted = {v.index for v in wrt}
        kept: dict[int, np.ndarray] = {}
        for idx in range(out.index, -1, -1):
            g = grads.pop(idx, None)
            if g is None:
                continue
            node = self.nodes[idx]
            if idx in wanted:
                kept[idx] = g
            if node.prim is None:
                continue
            vals = [self.nodes[a].value if isinstance(a, int) else a for a in node.args]
            needs = [isinstance(a, int) for a in node.args]
            parts = node.prim.vjp(g, node.value, vals, needs, **node.params)
            for a, part in zip(node.args, parts):
                if part is None or not isinstance(a, int):
                    continue
                if a in grads:
                    grads[a] = grads[a] + part
                else:
                    grads[a] = part
        return [kept.get(v.index, np.zeros_like(v.value)) for v in wrt]


class Var:
    """Handle to a value recorded on a tape."""

    __slots__ = ("tape", "index")
    __array_ufunc__ = None  # make ndarray <op> Var dispatch to Var's reflected ops

    def __init__(self, tape: Tape, index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.index].value

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Var(#{self.index}, shape={self.shape})"

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x)


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------


class Primitive:
    def __init__(self, name: str, fwd: Callable, vjp: Callable):
        self.name = name
        self.fwd = fwd
        self.vjp = vjp

    def __call__(self, *args, **params):
        tape = None
        for a in args:
            if isinstance(a, Var):
                if tape is None:
                    tape = a.tape
                elif a.tape is not tape:
                    raise ContractError(f"{self.name}: arguments recorded on different tapes")
        vals = [a.value if isinstance(a, Var) else a for a in args]
        out = self.fwd(*vals, **params)
        if tape is None:
            return out
        return tape._record(self, args, out, params)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    shape = tuple(np.shape(shape)) if not isinstance(shape, tuple) else shape
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _f64(x):
    return np.asarray(x, dtype=np.float64)


add = Primitive(
    "add",
    lambda a, b: _f64(a) + b,
    lambda g, out, v, needs: [
        _unbroadcast(g, np.shape(v[0])) if needs[0] else None,
        _unbroadcast(g, np.shape(v[1])) if needs[1] else None,
    ],
)

sub = Primitive(
    "sub",
    lambda a, b: _f64(a) - b,
    lambda g, out, v, needs: [
        _unbroadcast(g, np.shape(v[0])) if needs[0] else None,
        _unbroadcast(-g, np.shape(v[1])) if needs[1] else None,
    ],
)

mul = Primitive(
    "mul",
    lambda a, b: _f64(a) * b,
    lambda g, out, v, needs: [
        _unbroadcast(g * v[1], np.shape(v[0])) if needs[0] else None,
        _unbroadcast(g * v[0], np.shape(v[1])) if needs[1] else None,
    ],
)

div = Primitive(
    "div",
    lambda a, b: _f64(a) / b,
    lambda g, out, v, needs: [
        _unbroadcast(g / v[1], np.shape(v[0])) if needs[0] else None,
        _unbroadcast(-g * out / v[1], np.shape(v[1])) if needs[1] else None,
    ],
)

neg = Primitive("neg", lambda a: -_f64(a), lambda g, out, v, needs: [-g])

exp = Primitive("exp", lambda a: np.exp(a), lambda g, out, v, needs: [g * out])

log = Primitive("log", lambda a: np.log(a), lambda g, out, v, needs: [g / v[0]])

tanh = Primitive("tanh", lambda a: np.tanh(a), lambda g, out, v, needs: [g * (1.0 - out * out)])


def _sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * _f64(a)))


sigmoid = Primitive("sigmoid", _sigmoid, lambda g, out, v, needs: [g * out * (1.0 - out)])

power = Primitive(
    "power",
    lambda a, p: _f64(a) ** p,
    lambda g, out, v, needs: [g * v[1] * v[0] ** (v[1] - 1), None],
)


def _matmul_vjp(g, out, v, needs):
    a, b = v
    ga = gb = None
    if needs[0]:
        if b.ndim == 1:
            ga = np.multiply.outer(g, b) if a.ndim > 1 else g * b
        else:
            ga = g @ np.swapaxes(b, -1, -2) if a.ndim > 1 else (g[..., None, :] @ np.swapaxes(b, -1, -2))[..., 0, :]
        ga = _unbroadcast(ga, a.shape)
    if needs[1]:
        if a.ndim == 1:
            gb = np.multiply.outer(a, g) if b.ndim > 1 else g * a
        else:
            gb = np.swapaxes(a, -1, -2) @ (g if b.ndim > 1 else g[..., None])
            if b.ndim == 1:
                gb = gb[..., 0]
        gb = _unbroadcast(gb, b.shape)
    return [ga, gb]


matmul = Primitive("matmul", lambda a, b: np.matmul(_f64(a), b), _matmul_vjp)


def _sum_vjp(g, out, v, needs, axis=None, keepdims=False):
    shape = np.shape(v[0])
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return [np.broadcast_to(g, shape).copy()]


sum_ = Primitive(
    "sum",
    lambda a, axis=None, keepdims=False: np.sum(_f64(a), axis=axis, keepdims=keepdims),
    _sum_vjp,
)


def mean(a, axis=None, keepdims=False):
    shape = np.shape(value_of(a))
    if axis is None:
        count = int(np.prod(shape))
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([shape[i] for i in axes]))
    return sum_(a, axis=axis, keepdims=keepdims) * (1.0 / count)


_reshape = Primitive(
    "reshape",
    lambda a, shape: np.reshape(_f64(a), shape),
    lambda g, out, v, needs, shape: [np.reshape(g, np.shape(v[0]))],
)

_transpose = Primitive(
    "transpose",
    lambda a, axes: np.transpose(_f64(a), axes),
    lambda g, out, v, needs, axes: [np.transpose(g, np.argsort(axes))],
)


def _is_basic_index(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


def _getitem_vjp(g, out, v, needs, idx):
    z = np.zeros(np.shape(v[0]))
    if _is_basic_index(idx):
        z[idx] = g
    else:
        np.add.at(z, idx, g)
    return [z]


_getitem = Primitive("getitem", lambda a, idx: _f64(a)[idx], _getitem_vjp)


def getitem(a, idx):
    return _getitem(a, idx=idx)


def reshape(a, shape):
    return _reshape(a, shape=tuple(shape))


def transpose(a, axes):
    return _transpose(a, axes=tuple(axes))


def _concat_fwd(*arrays, axis=0):
    return np.concatenate([_f64(a) for a in arrays], axis=axis)


def _concat_vjp(g, out, v, needs, axis=0):
    sizes = [np.shape(a)[axis] for a in v]
    cuts = np.cumsum(sizes)[:-1]
    return list(np.split(g, cuts, axis=axis))


concat_prim = Primitive("concat", _concat_fwd, _concat_vjp)


def concat(items, axis=0):
    return concat_prim(*items, axis=axis)


_GELU_C = np.sqrt(2.0 / np.pi)


def _gelu_fwd(x):
    x = _f64(x)
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * x * (1.0 + 0.044715 * x * x)))


def _gelu_vjp(g, out, v, needs):
    x = v[0]
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x2)
    return [g * (0.5 * (1.0 + t) + 0.5 * x * dt)]


gelu = Primitive("gelu", _gelu_fwd, _gelu_vjp)


def _ln_fwd(x, gamma, beta, eps=1e-6):
    x = _f64(x)
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    return xc * inv * gamma + beta


def _ln_vjp(g, out, v, needs, eps=1e-6):
    x, gamma, beta = v
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gx = gxhat = None
    if needs[0]:
        gxhat = g * gamma
        gx = inv * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
    gg = _unbroadcast(g * xhat, np.shape(gamma)) if needs[1] else None
    gb = _unbroadcast(g, np.shape(beta)) if needs[2] else None
    return [gx, gg, gb]


layer_norm = Primitive("layer_norm", _ln_fwd, _ln_vjp)


def _wsoftmax_parts(s, w):
    s = _f64(s)
    w = np.broadcast_to(_f64(w), s.shape)
    live = w > 0
    m = np.max(np.where(live, s, -np.inf), axis=-1, keepdims=True)
    e = np.where(live, np.exp(np.where(live, s - m, 0.0)), 0.0)
    z = (w * e).sum(axis=-1, keepdims=True)
    return e, z, w


def _wsoftmax_fwd(s, w):
    e, z, w = _wsoftmax_parts(s, w)
    return w * e / z


def _wsoftmax_vjp(g, out, v, needs):
    s, w = v
    inner = (g * out).sum(axis=-1, keepdims=True)
    gs = out * (g - inner) if needs[0] else None
    gw = None
    if needs[1]:
        e, z, _ = _wsoftmax_parts(s, w)
        gw = _unbroadcast((e / z) * (g - inner), np.shape(w))
    return [gs, gw]


weighted_softmax = Primitive("weighted_softmax", _wsoftmax_fwd, _wsoftmax_vjp)
weighted_softmax.__doc__ = """Softmax over the last axis with non-negative key weights.

``p_j = w_j exp(s_j) / sum_k w_k exp(s_k)``.  Zero weights exclude a key
exactly, the same as adding -inf to its logit, while keeping every stored
value finite.  Soft weights in (0, 1) interpolate smoothly.
"""


def softmax(s):
    return weighted_softmax(s, np.ones(np.shape(value_of(s))[-1]))


def _log_softmax(x):
    m = x.max(axis=-1, keepdims=True)
    sh = x - m
    return sh - np.log(np.exp(sh).sum(axis=-1, keepdims=True))


def _ce_targets(labels, classes, smoothing):
    q = np.full((len(labels), classes), smoothing / classes)
    q[np.arange(len(labels)), labels] += 1.0 - smoothing
    return q


def _ce_fwd(logits, labels, smoothing=0.0, reduction="mean"):
    logp = _log_softmax(_f64(logits))
    q = _ce_targets(labels, logp.shape[-1], smoothing)
    per = -(q * logp).sum(axis=-1)
    if reduction == "none":
        return per
    if reduction == "sum":
        return per.sum()
    return per.mean()


def _ce_vjp(g, out, v, needs, smoothing=0.0, reduction="mean"):
    logits, labels = v
    p = np.exp(_log_softmax(logits))
    q = _ce_targets(labels, p.shape[-1], smoothing)
    if reduction == "none":
        scale = g[:, None]
    elif reduction == "sum":
        scale = g
    else:
        scale = g / len(labels)
    return [(p - q) * scale, None]


cross_entropy_prim = Primitive("cross_entropy", _ce_fwd, _ce_vjp)


def cross_entropy(logits, labels, smoothing: float = 0.0, reduction: str = "mean"):
    labels = np.asarray(labels, dtype=np.int64)
    return cross_entropy_prim(logits, labels, smoothing=float(smoothing), reduction=reduction)


# ---------------------------------------------------------------------------
# Differentiation entry points
# ---------------------------------------------------------------------------


def _check_finite_forward(tape: Tape, out):
    if np.all(np.isfinite(value_of(out))):
        return
    i = tape.first_nonfinite()
    if i is None:
        i = out.index if isinstance(out, Var) else -1
    op = tape.nodes[i].op if i >= 0 else "output"
    raise NumericError(f"non-finite value in forward pass at node {i} ({op})")


def value_and_grad(loss_fn: Callable[..., Any], at: Sequence) -> tuple[float, list[np.ndarray]]:
    """Evaluate ``loss_fn(*at)`` and its gradient with respect to every input."""
    tape = Tape()
    xs = [tape.var(a) for a in at]
    out = loss_fn(*xs)
    if np.size(value_of(out)) != 1:
        raise ContractError(f"loss must be scalar, got shape {np.shape(value_of(out))}")
    _check_finite_forward(tape, out)
    if not isinstance(out, Var):
        return float(np.asarray(out).reshape(())), [np.zeros_like(x.value) for x in xs]
    grads = tape.backward(out, xs)
    return float(out.value.reshape(())), grads


def grad(loss_fn: Callable[..., Any], at: Sequence) -> list[np.ndarray]:
    return value_and_grad(loss_fn, at)[1]


def fd_step(z: np.ndarray, v: np.ndarray) -> float:
    """Scale-adaptive difference step for :func:`hvp`."""
    zinf = float(np.max(np.abs(z))) if np.size(z) else 0.0
    vinf = float(np.max(np.abs(v))) if np.size(v) else 0.0
    return np.cbrt(EPS) * (1.0 + zinf) / (1.0 + vinf)


def hvp(loss_fn: Callable, z, v) -> np.ndarray:
    """Hessian-vector product of a scalar loss at ``z`` along ``v``.

    Uses the symmetric difference of two reverse-mode gradients, which is
    exact up to roundoff for quadratic losses.  A zero ``v`` yields zeros.
    """
    z = np.asarray(z, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if z.shape != v.shape:
        raise ContractError(f"direction shape {v.shape} does not match point shape {z.shape}")
    if not np.any(v):
        return np.zeros_like(z)
    h = fd_step(z, v)
    (gp,) = grad(loss_fn, [z + h * v])
    (gm,) = grad(loss_fn, [z - h * v])
    out = (gp - gm) / (2.0 * h)
    if not np.all(np.isfinite(out)):
        raise NumericError("Hessian-vector product overflowed")
    return out


def full_hessian_oracle(loss_fn: Callable, z, symmetrize: bool = True) -> np.ndarray:
    """Dense Hessian assembled column by column from :func:`hvp`.

    Guarded to ``dim(z) <= 512``; intended as a test oracle.
    """
    z = np.asarray(z, dtype=np.float64)
    n = z.size
    if n > HESSIAN_ORACLE_MAX_DIM:
        raise SizeError(f"oracle refuses dimension {n} > {HESSIAN_ORACLE_MAX_DIM}")
    flat = z.reshape(-1)

    def flat_loss(u):
        return loss_fn(u.reshape(z.shape))

    cols = []
    for i in range(n):
        e = np.zeros(n)
        e[i] = 1.0
        cols.append(hvp(flat_loss, flat, e))
    hess = np.stack(cols, axis=1)
    if symmetrize:
        hess = 0.5 * (hess + hess.T)
    return hess
