"""Immutable expression trees over a fixed operator set.

Trees are built from four node types: :class:`Const`, :class:`Var`,
:class:`Slot` (a constant placeholder inside a skeleton) and :class:`Op`.
Evaluation is vectorized over a batch of points; a point whose value at any
node is non-finite or exceeds :data:`VALUE_CAP` in magnitude is a domain
failure for that point.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

VALUE_CAP = 1e100


class DomainError(ArithmeticError):
    """Raised when an expression cannot be evaluated at the requested point(s).

    ``op`` is the kind of node where the failure first appeared and
    ``reason`` is ``"domain"`` for a non-finite value (pole, sqrt/log of an
    invalid argument) or ``"magnitude"`` for a finite value above the cap.
    """

    def __init__(self, op: str, reason: str = "domain"):
        super().__init__(f"{reason} failure at node '{op}'")
        self.op = op
        self.reason = reason


@dataclass(frozen=True)
class Operator:
    name: str
    arity: int
    fn: Callable
    deriv: Callable  # (args..., value) -> tuple of partials
    symbol: str = ""


def _d_inv(a, v):
    return (-v * v,)


def _d_sqrt(a, v):
    return (0.5 / v,)


def _d_tan(a, v):
    return (1.0 + v * v,)


OPERATORS: dict[str, Operator] = {
    op.name: op
    for op in [
        Operator("add", 2, np.add, lambda a, b, v: (1.0, 1.0), "+"),
        Operator("sub", 2, np.subtract, lambda a, b, v: (1.0, -1.0), "-"),
        Operator("mul", 2, np.multiply, lambda a, b, v: (b, a), "*"),
        Operator("inv", 1, np.reciprocal, _d_inv),
        Operator("abs", 1, np.abs, lambda a, v: (np.sign(a),)),
        Operator("sqr", 1, np.square, lambda a, v: (2.0 * a,)),
        Operator("sqrt", 1, np.sqrt, _d_sqrt),
        Operator("sin", 1, np.sin, lambda a, v: (np.cos(a),)),
        Operator("cos", 1, np.cos, lambda a, v: (-np.sin(a),)),
        Operator("tan", 1, np.tan, _d_tan),
        Operator("atan", 1, np.arctan, lambda a, v: (1.0 / (1.0 + a * a),)),
        Operator("log", 1, np.log, lambda a, v: (1.0 / a,)),
        Operator("exp", 1, np.exp, lambda a, v: (v,)),
    ]
}

BINARY_OPS = tuple(n for n, o in OPERATORS.items() if o.arity == 2)
UNARY_OPS = tuple(n for n, o in OPERATORS.items() if o.arity == 1)


@dataclass(frozen=True)
class OperatorTable:
    """Operator pools with unnormalized sampling weights."""

    binary: dict[str, float] = field(
        default_factory=lambda: {"add": 1.0, "sub": 1.0, "mul": 1.0}
    )
    unary: dict[str, float] = field(
        default_factory=lambda: {
            "inv": 5.0, "abs": 1.0, "sqr": 3.0, "sqrt": 3.0, "sin": 1.0,
            "cos": 1.0, "tan": 0.2, "atan": 0.2, "log": 0.2, "exp": 1.0,
        }
    )

    def __post_init__(self):
        for pool, arity in ((self.binary, 2), (self.unary, 1)):
            for name, w in pool.items():
                if name not in OPERATORS or OPERATORS[name].arity != arity:
                    raise ValueError(f"unknown {arity}-ary operator {name!r}")
                if not w > 0:
                    raise ValueError(f"operator weight must be positive: {name}={w}")

    def probabilities(self, arity: int) -> tuple[list[str], np.ndarray]:
        pool = self.binary if arity == 2 else self.unary
        names = list(pool)
        w = np.array([pool[n] for n in names], dtype=float)
        return names, w / w.sum()


# --------------------------------------------------------------------------
# nodes


class Expr:
    __slots__ = ()

    def __iter__(self) -> Iterator[Expr]:
        """Prefix-order traversal of all nodes."""
        stack = [self]
        while stack:
            node = stack.pop()
            yield node
            if isinstance(node, Op):
                stack.extend(reversed(node.args))

    def __str__(self) -> str:
        return to_infix(self)


@dataclass(frozen=True)
class Const(Expr):
    value: float

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise ValueError(f"constant must be finite, got {self.value}")


@dataclass(frozen=True)
class Var(Expr):
    index: int  # 1-based

    def __post_init__(self):
        if self.index < 1:
            raise ValueError(f"variable index must be >= 1, got {self.index}")


@dataclass(frozen=True)
class Slot(Expr):
    index: int  # 0-based position in the constant vector


@dataclass(frozen=True)
class Op(Expr):
    name: str
    args: tuple[Expr, ...]

    def __post_init__(self):
        op = OPERATORS.get(self.name)
        if op is None:
            raise ValueError(f"unknown operator {self.name!r}")
        if len(self.args) != op.arity:
            raise ValueError(f"{self.name} takes {op.arity} argument(s), got {len(self.args)}")


def op(name: str, *args: Expr | float) -> Op:
    """Build an operator node; bare numbers become constants."""
    return Op(name, tuple(a if isinstance(a, Expr) else Const(float(a)) for a in args))


def x(index: int) -> Var:
    return Var(index)


# --------------------------------------------------------------------------
# structural utilities


def complexity(expr: Expr) -> int:
    """Total node count."""
    return sum(1 for _ in expr)


def variables(expr: Expr) -> set[int]:
    return {n.index for n in expr if isinstance(n, Var)}


def dimension(expr: Expr) -> int:
    """Largest variable index (0 for a constant expression)."""
    return max(variables(expr), default=0)


def constants(expr: Expr) -> np.ndarray:
    return np.array([n.value for n in expr if isinstance(n, Const)], dtype=float)


@dataclass(frozen=True)
class Skeleton:
    """Expression whose constants are replaced by indexed slots (prefix order)."""

    expr: Expr
    n_slots: int

    @property
    def key(self) -> str:
        return skeleton_key(self.expr)

    def substitute(self, theta: Sequence[float]) -> Expr:
        return substitute(self.expr, theta)


def skeletonize(expr: Expr) -> tuple[Skeleton, np.ndarray]:
    counter = 0
    values: list[float] = []

    def walk(node: Expr) -> Expr:
        nonlocal counter
        if isinstance(node, (Const, Slot)):
            if isinstance(node, Const):
                values.append(node.value)
            else:
                values.append(math.nan)
            counter += 1
            return Slot(counter - 1)
        if isinstance(node, Op):
            return Op(node.name, tuple(walk(a) for a in node.args))
        return node

    skel = walk(expr)
    return Skeleton(skel, counter), np.array(values, dtype=float)


def substitute(expr: Expr, theta: Sequence[float]) -> Expr:
    """Replace every slot by ``theta[slot.index]``."""

    def walk(node: Expr) -> Expr:
        if isinstance(node, Slot):
            return Const(float(theta[node.index]))
        if isinstance(node, Op):
            return Op(node.name, tuple(walk(a) for a in node.args))
        return node

    return walk(expr)


def map_variables(expr: Expr, fn: Callable[[Var], Expr]) -> Expr:
    def walk(node: Expr) -> Expr:
        if isinstance(node, Var):
            return fn(node)
        if isinstance(node, Op):
            return Op(node.name, tuple(walk(a) for a in node.args))
        return node

    return walk(expr)


def substitute_affine(expr: Expr, mu: Sequence[float], sigma: Sequence[float]) -> Expr:
    """Replace each ``x_d`` by ``(x_d - mu_d) * (1 / sigma_d)``.

    Dimensions with ``mu_d == 0`` and ``sigma_d == 1`` are left untouched.
    """
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma <= 0):
        raise ValueError("sigma must be strictly positive")

    def repl(v: Var) -> Expr:
        m, s = float(mu[v.index - 1]), float(sigma[v.index - 1])
        node: Expr = v
        if m != 0.0:
            node = Op("sub", (node, Const(m)))
        if s != 1.0:
            node = Op("mul", (node, Const(1.0 / s)))
        return node

    return map_variables(expr, repl)


# --------------------------------------------------------------------------
# printers


def to_prefix(expr: Expr) -> list[str]:
    """Prefix tokens; constants are written with ``repr`` so they round-trip."""
    out = []
    for node in expr:
        if isinstance(node, Op):
            out.append(node.name)
        elif isinstance(node, Var):
            out.append(f"x_{node.index}")
        elif isinstance(node, Slot):
            out.append("C")
        else:
            out.append(repr(node.value))
    return out


def from_prefix(tokens: str | Sequence[str]) -> Expr:
    """Inverse of :func:`to_prefix` (slots are numbered in prefix order)."""
    if isinstance(tokens, str):
        tokens = tokens.split()
    pos = 0
    n_slots = 0

    def parse() -> Expr:
        nonlocal pos, n_slots
        if pos >= len(tokens):
            raise ValueError("truncated prefix expression")
        tok = tokens[pos]
        pos += 1
        if tok in OPERATORS:
            return Op(tok, tuple(parse() for _ in range(OPERATORS[tok].arity)))
        if tok.startswith("x_"):
            return Var(int(tok[2:]))
        if tok == "C":
            n_slots += 1
            return Slot(n_slots - 1)
        return Const(float(tok))

    expr = parse()
    if pos != len(tokens):
        raise ValueError(f"dangling tokens after position {pos}")
    return expr


def _fmt_const(v: float, precision: int | None) -> str:
    s = repr(v) if precision is None else f"{v:.{precision}g}"
    return f"({s})" if v < 0 else s


def to_infix(expr: Expr, precision: int | None = None) -> str:
    if isinstance(expr, Const):
        return _fmt_const(expr.value, precision)
    if isinstance(expr, Var):
        return f"x_{expr.index}"
    if isinstance(expr, Slot):
        return "C"
    o = OPERATORS[expr.name]
    if o.arity == 2:
        a, b = (to_infix(arg, precision) for arg in expr.args)
        return f"({a} {o.symbol} {b})"
    return f"{expr.name}({to_infix(expr.args[0], precision)})"


def skeleton_key(expr: Expr) -> str:
    """Canonical structure string: constants and slots both print as ``C``."""
    return " ".join("C" if isinstance(n, (Const, Slot)) else t
                    for n, t in zip(expr, to_prefix(expr)))


# --------------------------------------------------------------------------
# evaluation


class _Trace:
    __slots__ = ("values", "failure")

    def __init__(self):
        self.values: dict[int, np.ndarray] = {}
        self.failure: DomainError | None = None


def _forward(node: Expr, X: np.ndarray, theta, trace: _Trace) -> np.ndarray:
    n = X.shape[0]
    if isinstance(node, Var):
        v = X[:, node.index - 1]
    elif isinstance(node, Const):
        v = np.full(n, node.value)
    elif isinstance(node, Slot):
        if theta is None:
            raise ValueError("expression has slots; pass constant values")
        v = np.full(n, float(theta[node.index]))
    else:
        args = [_forward(a, X, theta, trace) for a in node.args]
        v = np.asarray(OPERATORS[node.name].fn(*args), dtype=float)
        bad = ~np.isfinite(v)
        over = ~bad & (np.abs(v) > VALUE_CAP)
        if bad.any() or over.any():
            inherited = np.zeros(n, dtype=bool)
            for a in args:
                inherited |= np.isnan(a)
            if trace.failure is None:
                fresh_bad = bad & ~inherited
                if fresh_bad.any():
                    trace.failure = DomainError(node.name, "domain")
                elif over.any():
                    trace.failure = DomainError(node.name, "magnitude")
            v = np.where(bad | over, np.nan, v)
    trace.values[id(node)] = v
    return v


def _as_matrix(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    return X


def _check_dim(expr: Expr, X: np.ndarray):
    d = dimension(expr)
    if d > X.shape[1]:
        raise ValueError(f"expression uses x_{d} but inputs have {X.shape[1]} column(s)")


def evaluate_batch(expr: Expr, X, theta=None, *, strict: bool = False) -> np.ndarray:
    """Evaluate on every row of ``X``; failed points are NaN.

    With ``strict=True`` any failed point raises :class:`DomainError`.
    ``theta`` supplies values for slots.
    """
    X = _as_matrix(X)
    _check_dim(expr, X)
    trace = _Trace()
    with np.errstate(all="ignore"):
        v = _forward(expr, X, theta, trace)
    if strict and trace.failure is not None:
        raise trace.failure
    return np.array(v, dtype=float, copy=True)


def evaluate(expr: Expr, x) -> float:
    """Evaluate at a single point, raising :class:`DomainError` on failure."""
    return float(evaluate_batch(expr, np.asarray(x, dtype=float)[None, :], strict=True)[0])


def first_failure(expr: Expr, X, theta=None) -> DomainError | None:
    X = _as_matrix(X)
    trace = _Trace()
    with np.errstate(all="ignore"):
        _forward(expr, X, theta, trace)
    return trace.failure


def _backward(node: Expr, adj: np.ndarray, trace: _Trace, J: np.ndarray):
    if isinstance(node, Slot):
        J[:, node.index] += adj
        return
    if not isinstance(node, Op):
        return
    args = node.args
    partials = OPERATORS[node.name].deriv(
        *(trace.values[id(a)] for a in args), trace.values[id(node)]
    )
    for a, p in zip(args, partials):
        if isinstance(a, (Op, Slot)):
            _backward(a, adj * p, trace, J)


def jacobian(skeleton: Skeleton | Expr, X, theta) -> tuple[np.ndarray, np.ndarray]:
    """Values and d(value)/d(theta) for a slotted expression, by reverse-mode AD.

    Returns ``(values, J)`` with shapes ``(N,)`` and ``(N, n_slots)``. Failed
    points carry NaN values; their Jacobian rows are unspecified.
    """
    expr = skeleton.expr if isinstance(skeleton, Skeleton) else skeleton
    X = _as_matrix(X)
    _check_dim(expr, X)
    theta = np.asarray(theta, dtype=float)
    trace = _Trace()
    J = np.zeros((X.shape[0], theta.size))
    with np.errstate(all="ignore"):
        v = _forward(expr, X, theta, trace)
        _backward(expr, np.ones(X.shape[0]), trace, J)
    return v, J


def grad_constants(expr: Expr, x) -> np.ndarray:
    """Partial derivatives of ``expr`` at point ``x`` w.r.t. each constant (prefix order)."""
    skel, theta = skeletonize(expr)
    v, J = jacobian(skel, np.asarray(x, dtype=float)[None, :], theta)
    if not np.isfinite(v[0]):
        raise first_failure(skel.expr, np.asarray(x, dtype=float)[None, :], theta) or DomainError("?")
    g = J[0]
    if not np.all(np.isfinite(g)):
        raise DomainError("grad", "domain")
    return g
