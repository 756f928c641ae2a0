"""Forward-mode automatic differentiation on numpy values.

First-order derivatives are propagated through :class:`Dual` numbers whose
tangent block sits in a trailing axis, so one evaluation differentiates along
many directions at once and, because every rule broadcasts over leading axes,
over arbitrary batches (all trajectory stages, all quadrature nodes, ...).

Second-order derivatives use :class:`Dual2`, the dual-over-dual number with
its four components ``(val, d1, d2, d12)`` stored flat: ``d12`` carries the
mixed second derivative along the two seeded directions.  Seeding the two
tangent sets against a ``(m, m)`` batch yields a full Hessian in a single
evaluation.

Functions are written against the dispatching math helpers (``sin``, ``cos``,
``arctan``, ...) so the same expression evaluates on plain arrays, ``Dual``
and ``Dual2`` operands.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Dual",
    "Dual2",
    "value",
    "seed",
    "jacobian",
    "hessian",
    "sin",
    "cos",
    "tan",
    "arctan",
    "exp",
    "log",
    "sqrt",
    "tanh",
]


def _ex(v):
    """Append a singleton axis so a value broadcasts against a tangent block."""
    return np.asarray(v)[..., None]


class Dual:
    """Value with a block of tangents; ``dot[..., k]`` is direction k."""

    __slots__ = ("val", "dot")

    # Make ndarray <op> Dual defer to the reflected methods below instead of
    # broadcasting elementwise into an object array.
    __array_ufunc__ = None

    def __init__(self, val, dot):
        self.val = np.asarray(val, dtype=float)
        self.dot = np.asarray(dot, dtype=float)

    # -- arithmetic ---------------------------------------------------------
    def __add__(self, o):
        if isinstance(o, Dual):
            return Dual(self.val + o.val, self.dot + o.dot)
        return Dual(self.val + o, self.dot)

    __radd__ = __add__

    def __sub__(self, o):
        if isinstance(o, Dual):
            return Dual(self.val - o.val, self.dot - o.dot)
        return Dual(self.val - o, self.dot)

    def __rsub__(self, o):
        return Dual(o - self.val, -self.dot)

    def __neg__(self):
        return Dual(-self.val, -self.dot)

    def __pos__(self):
        return self

    def __mul__(self, o):
        if isinstance(o, Dual):
            return Dual(self.val * o.val, self.dot * _ex(o.val) + _ex(self.val) * o.dot)
        return Dual(self.val * o, self.dot * _ex(o))

    __rmul__ = __mul__

    def __truediv__(self, o):
        if isinstance(o, Dual):
            val = self.val / o.val
            return Dual(val, (self.dot - _ex(val) * o.dot) / _ex(o.val))
        return Dual(self.val / o, self.dot / _ex(o))

    def __rtruediv__(self, o):
        val = o / self.val
        return Dual(val, -_ex(val / self.val) * self.dot)

    def __pow__(self, n):
        if isinstance(n, Dual):
            raise TypeError("dual exponents are not supported")
        return Dual(self.val**n, _ex(n * self.val ** (n - 1)) * self.dot)

    # value-level comparisons, for branching on magnitudes
    def __lt__(self, o):
        return self.val < value(o)

    def __le__(self, o):
        return self.val <= value(o)

    def __gt__(self, o):
        return self.val > value(o)

    def __ge__(self, o):
        return self.val >= value(o)

    def __repr__(self):
        return f"Dual(val={self.val!r})"


class Dual2:
    """Dual-over-dual number: two first-order tangents plus the mixed term.

    Equivalent to ``Dual(Dual(val, d1), Dual(d2, d12))`` with the nesting
    flattened so every component is a plain array and the rules vectorize.
    """

    __slots__ = ("val", "d1", "d2", "d12")

    __array_ufunc__ = None

    def __init__(self, val, d1, d2, d12):
        self.val = np.asarray(val, dtype=float)
        self.d1 = np.asarray(d1, dtype=float)
        self.d2 = np.asarray(d2, dtype=float)
        self.d12 = np.asarray(d12, dtype=float)

    def __add__(self, o):
        if isinstance(o, Dual2):
            return Dual2(self.val + o.val, self.d1 + o.d1, self.d2 + o.d2, self.d12 + o.d12)
        return Dual2(self.val + o, self.d1, self.d2, self.d12)

    __radd__ = __add__

    def __sub__(self, o):
        if isinstance(o, Dual2):
            return Dual2(self.val - o.val, self.d1 - o.d1, self.d2 - o.d2, self.d12 - o.d12)
        return Dual2(self.val - o, self.d1, self.d2, self.d12)

    def __rsub__(self, o):
        return Dual2(o - self.val, -self.d1, -self.d2, -self.d12)

    def __neg__(self):
        return Dual2(-self.val, -self.d1, -self.d2, -self.d12)

    def __pos__(self):
        return self

    def __mul__(self, o):
        if isinstance(o, Dual2):
            return Dual2(
                self.val * o.val,
                self.d1 * o.val + self.val * o.d1,
                self.d2 * o.val + self.val * o.d2,
                self.d12 * o.val + self.d1 * o.d2 + self.d2 * o.d1 + self.val * o.d12,
            )
        return Dual2(self.val * o, self.d1 * o, self.d2 * o, self.d12 * o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        if not isinstance(o, Dual2):
            return Dual2(self.val / o, self.d1 / o, self.d2 / o, self.d12 / o)
        val = self.val / o.val
        d1 = (self.d1 - val * o.d1) / o.val
        d2 = (self.d2 - val * o.d2) / o.val
        d12 = (self.d12 - d1 * o.d2 - d2 * o.d1 - val * o.d12) / o.val
        return Dual2(val, d1, d2, d12)

    def __rtruediv__(self, o):
        return Dual2(o, np.zeros_like(self.val), np.zeros_like(self.val), np.zeros_like(self.val)) / self

    def __pow__(self, n):
        if isinstance(n, Dual2):
            raise TypeError("dual exponents are not supported")
        f1 = n * self.val ** (n - 1)
        f2 = n * (n - 1) * self.val ** (n - 2)
        return Dual2(self.val**n, f1 * self.d1, f1 * self.d2, f2 * self.d1 * self.d2 + f1 * self.d12)

    def __lt__(self, o):
        return self.val < value(o)

    def __le__(self, o):
        return self.val <= value(o)

    def __gt__(self, o):
        return self.val > value(o)

    def __ge__(self, o):
        return self.val >= value(o)

    def __repr__(self):
        return f"Dual2(val={self.val!r})"


def value(x):
    """Primal part of a possibly-dual quantity."""
    if isinstance(x, (Dual, Dual2)):
        return x.val
    return np.asarray(x, dtype=float)


# -- dispatching math functions --------------------------------------------


def _unary(x, f, df, d2f):
    if isinstance(x, Dual):
        return Dual(f(x.val), _ex(df(x.val)) * x.dot)
    if isinstance(x, Dual2):
        g1 = df(x.val)
        return Dual2(f(x.val), g1 * x.d1, g1 * x.d2, d2f(x.val) * x.d1 * x.d2 + g1 * x.d12)
    return f(x)


def sin(x):
    return _unary(x, np.sin, np.cos, lambda v: -np.sin(v))


def cos(x):
    return _unary(x, np.cos, lambda v: -np.sin(v), lambda v: -np.cos(v))


def tan(x):
    return _unary(x, np.tan, lambda v: 1.0 + np.tan(v) ** 2, lambda v: 2.0 * np.tan(v) * (1.0 + np.tan(v) ** 2))


def arctan(x):
    return _unary(x, np.arctan, lambda v: 1.0 / (1.0 + v * v), lambda v: -2.0 * v / (1.0 + v * v) ** 2)


def exp(x):
    return _unary(x, np.exp, np.exp, np.exp)


def log(x):
    return _unary(x, np.log, lambda v: 1.0 / v, lambda v: -1.0 / (v * v))


def sqrt(x):
    return _unary(
        x,
        np.sqrt,
        lambda v: 0.5 / np.sqrt(v),
        lambda v: -0.25 / np.sqrt(v) ** 3,
    )


def tanh(x):
    return _unary(
        x,
        np.tanh,
        lambda v: 1.0 - np.tanh(v) ** 2,
        lambda v: -2.0 * np.tanh(v) * (1.0 - np.tanh(v) ** 2),
    )


# -- seeding / collection helpers -------------------------------------------


def seed(components: Sequence, offset: int, n_dirs: int) -> list:
    """Wrap scalar components as :class:`Dual` with unit tangents.

    Component ``k`` receives direction ``offset + k`` of an ``n_dirs``-wide
    tangent block.  Components may carry arbitrary batch axes.
    """
    out = []
    for k, c in enumerate(components):
        c = np.asarray(c, dtype=float)
        dot = np.zeros(c.shape + (n_dirs,))
        dot[..., offset + k] = 1.0
        out.append(Dual(c, dot))
    return out


def jacobian(outputs: Sequence, n_dirs: int, batch_shape: tuple = ()) -> np.ndarray:
    """Stack output tangents into ``batch_shape + (n_out, n_dirs)``.

    Outputs that never touched a seeded input come back as plain arrays and
    contribute zero rows.
    """
    rows = []
    for o in outputs:
        if isinstance(o, Dual):
            rows.append(np.broadcast_to(o.dot, batch_shape + (n_dirs,)))
        else:
            rows.append(np.zeros(batch_shape + (n_dirs,)))
    return np.stack(rows, axis=-2)


def hessian(fn: Callable, point: Sequence[float]) -> np.ndarray:
    """Dense Hessian of a scalar-valued function of ``m`` scalar inputs.

    One dual-over-dual evaluation against an ``(m, m)`` batch: entry
    ``(j, k)`` of the batch seeds direction ``j`` at the inner level and
    direction ``k`` at the outer level, so the mixed component of the result
    is the full Hessian.
    """
    point = [float(v) for v in point]
    m = len(point)
    eye = np.eye(m)
    args = []
    for k, v in enumerate(point):
        val = np.full((m, m), v)
        d1 = np.tile(eye[:, k][:, None], (1, m))  # inner direction = row index
        d2 = np.tile(eye[:, k][None, :], (m, 1))  # outer direction = column index
        args.append(Dual2(val, d1, d2, np.zeros((m, m))))
    out = fn(args)
    if isinstance(out, Dual2):
        return np.array(out.d12, dtype=float)
    return np.zeros((m, m))
