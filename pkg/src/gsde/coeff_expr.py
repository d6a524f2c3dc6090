"""Coefficient expression language: parsing, symbolic derivatives, evaluation.

Coefficients ``b(t, x, y)``, ``h(t, x, y)`` and ``sigma(t, x, y)`` are written as
small arithmetic expressions over the variables ``t`` (time), ``x`` (the driver
value ``B_t``) and ``y`` (the state).  Grammar::

    expr   := term (('+' | '-') term)*
    term   := factor (('*' | '/') factor)*
    factor := number | ident | ident '(' expr ')' | '(' expr ')' | '-' factor

Trees are immutable.  There is no power operator; write ``y*y``.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from functools import cached_property
from typing import Union

import numba
import numpy as np

from .errors import (
    ArityError,
    AuditError,
    EvaluationError,
    ExprSyntaxError,
    NonDifferentiableError,
    UnknownIdentifierError,
    ValidationError,
)

VARIABLES = ("t", "x", "y")
FUNCTIONS = ("sin", "cos", "tanh", "exp", "abs")
UNARY_OPS = ("neg",) + FUNCTIONS
BINARY_OPS = ("add", "sub", "mul", "div")


@dataclass(frozen=True)
class Const:
    value: float

    @property
    def children(self):
        return ()


@dataclass(frozen=True)
class Var:
    name: str

    def __post_init__(self):
        if self.name not in VARIABLES:
            raise ValueError(f"unknown variable {self.name!r}")

    @property
    def children(self):
        return ()


@dataclass(frozen=True)
class Unary:
    op: str
    arg: "Expr"

    def __post_init__(self):
        if self.op not in UNARY_OPS:
            raise ValueError(f"unknown unary op {self.op!r}")

    @property
    def children(self):
        return (self.arg,)


@dataclass(frozen=True)
class Binary:
    op: str
    left: "Expr"
    right: "Expr"

    def __post_init__(self):
        if self.op not in BINARY_OPS:
            raise ValueError(f"unknown binary op {self.op!r}")

    @property
    def children(self):
        return (self.left, self.right)


Expr = Union[Const, Var, Unary, Binary]


# ---------------------------------------------------------------- parsing

_TOKEN = re.compile(
    r"\s*(?:"
    r"(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<ident>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/(),])"
    r")"
)


def _tokenize(source):
    tokens = []
    pos = 0
    n = len(source)
    while pos < n:
        if source[pos:].strip() == "":
            break
        m = _TOKEN.match(source, pos)
        if m is None or m.lastgroup is None:
            start = pos + (len(source[pos:]) - len(source[pos:].lstrip()))
            raise ExprSyntaxError(f"unexpected character {source[start]!r}", start)
        kind = m.lastgroup
        tokens.append((kind, m.group(kind), m.start(kind)))
        pos = m.end()
    tokens.append(("end", "", len(source)))
    return tokens


class _Parser:
    def __init__(self, source):
        self.tokens = _tokenize(source)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, text):
        kind, val, off = self.peek()
        if val != text or kind != "op":
            found = "end of input" if kind == "end" else repr(val)
            raise ExprSyntaxError(f"expected {text!r}, found {found}", off)
        return self.take()

    def parse(self):
        node = self.expr()
        kind, val, off = self.peek()
        if kind != "end":
            raise ExprSyntaxError(f"unexpected token {val!r}", off)
        return node

    def expr(self):
        node = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.take()[1]
            node = Binary("add" if op == "+" else "sub", node, self.term())
        return node

    def term(self):
        node = self.factor()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            op = self.take()[1]
            node = Binary("mul" if op == "*" else "div", node, self.factor())
        return node

    def factor(self):
        kind, val, off = self.peek()
        if kind == "num":
            self.take()
            return Const(float(val))
        if kind == "ident":
            self.take()
            if val in VARIABLES:
                if self.peek()[1] == "(":
                    raise ArityError(f"variable {val!r} is not callable", self.peek()[2])
                return Var(val)
            if val in FUNCTIONS:
                if self.peek()[1] != "(":
                    raise ArityError(f"function {val!r} needs one argument", self.peek()[2])
                self.take()
                if self.peek()[1] == ")":
                    raise ArityError(f"function {val!r} needs one argument", self.peek()[2])
                arg = self.expr()
                if self.peek()[1] == ",":
                    raise ArityError(f"function {val!r} takes exactly one argument", self.peek()[2])
                self.expect(")")
                return Unary(val, arg)
            raise UnknownIdentifierError(f"unknown identifier {val!r}", off)
        if kind == "op" and val == "(":
            self.take()
            node = self.expr()
            self.expect(")")
            return node
        if kind == "op" and val == "-":
            self.take()
            return Unary("neg", self.factor())
        found = "end of input" if kind == "end" else repr(val)
        raise ExprSyntaxError(f"unexpected {found}", off)


def parse(source: str) -> Expr:
    """Parse ``source`` into an expression tree.

    Raises ``ExprSyntaxError`` (with the character offset of the fault),
    ``UnknownIdentifierError`` or ``ArityError``.
    """
    if not source or not source.strip():
        raise ExprSyntaxError("empty expression", 0)
    return _Parser(source).parse()


# --------------------------------------------------------------- printing

_PREC = {"add": 1, "sub": 1, "mul": 2, "div": 2}
_SYMBOL = {"add": "+", "sub": "-", "mul": "*", "div": "/"}


def _prec(e):
    if isinstance(e, Binary):
        return _PREC[e.op]
    if isinstance(e, Unary) and e.op == "neg":
        return 3
    if isinstance(e, Const) and (e.value < 0 or math.copysign(1.0, e.value) < 0):
        return 3
    return 4


def format_expr(e: Expr) -> str:
    """Render ``e`` in the input syntax; ``parse(format_expr(e))`` is equivalent to ``e``."""
    if isinstance(e, Const):
        return repr(float(e.value))
    if isinstance(e, Var):
        return e.name
    if isinstance(e, Unary):
        if e.op == "neg":
            inner = format_expr(e.arg)
            return f"-{inner}" if _prec(e.arg) >= 3 else f"-({inner})"
        return f"{e.op}({format_expr(e.arg)})"
    p = _PREC[e.op]
    left = format_expr(e.left)
    if _prec(e.left) < p:
        left = f"({left})"
    right = format_expr(e.right)
    if _prec(e.right) <= p:
        right = f"({right})"
    return f"{left} {_SYMBOL[e.op]} {right}"


# ----------------------------------------------------------- construction

ZERO = Const(0.0)
ONE = Const(1.0)


def _is_const(e, value=None):
    return isinstance(e, Const) and (value is None or e.value == value)


def neg(a):
    if isinstance(a, Const):
        return Const(-a.value)
    if isinstance(a, Unary) and a.op == "neg":
        return a.arg
    return Unary("neg", a)


def add(a, b):
    if _is_const(a) and _is_const(b):
        return Const(a.value + b.value)
    if _is_const(a, 0.0):
        return b
    if _is_const(b, 0.0):
        return a
    return Binary("add", a, b)


def sub(a, b):
    if _is_const(a) and _is_const(b):
        return Const(a.value - b.value)
    if _is_const(b, 0.0):
        return a
    if _is_const(a, 0.0):
        return neg(b)
    return Binary("sub", a, b)


def mul(a, b):
    if _is_const(a) and _is_const(b):
        return Const(a.value * b.value)
    if _is_const(a, 0.0) or _is_const(b, 0.0):
        return ZERO
    if _is_const(a, 1.0):
        return b
    if _is_const(b, 1.0):
        return a
    return Binary("mul", a, b)


def div(a, b):
    if _is_const(a, 0.0):
        return ZERO
    if _is_const(b, 1.0):
        return a
    if _is_const(a) and _is_const(b) and b.value != 0.0:
        return Const(a.value / b.value)
    return Binary("div", a, b)


def free_vars(e: Expr) -> frozenset:
    if isinstance(e, Var):
        return frozenset((e.name,))
    out = frozenset()
    for c in e.children:
        out |= free_vars(c)
    return out


def contains_abs(e: Expr) -> bool:
    if isinstance(e, Unary) and e.op == "abs":
        return True
    return any(contains_abs(c) for c in e.children)


# -------------------------------------------------------- differentiation

def differentiate(e: Expr, var: str) -> Expr:
    """Exact symbolic partial derivative of ``e`` with respect to ``var``.

    Only trivial constant folding is applied.  ``abs`` of a subexpression that
    depends on ``var`` raises ``NonDifferentiableError``.
    """
    if var not in VARIABLES:
        raise ValueError(f"unknown variable {var!r}")
    if isinstance(e, Const):
        return ZERO
    if isinstance(e, Var):
        return ONE if e.name == var else ZERO
    if isinstance(e, Unary):
        u = e.arg
        if e.op == "abs":
            if var in free_vars(u):
                raise NonDifferentiableError(
                    f"cannot differentiate abs({format_expr(u)}) with respect to {var}"
                )
            return ZERO
        du = differentiate(u, var)
        if _is_const(du, 0.0):
            return ZERO
        if e.op == "neg":
            return neg(du)
        if e.op == "sin":
            return mul(Unary("cos", u), du)
        if e.op == "cos":
            return mul(neg(Unary("sin", u)), du)
        if e.op == "tanh":
            th = Unary("tanh", u)
            return mul(sub(ONE, mul(th, th)), du)
        if e.op == "exp":
            return mul(e, du)
        raise AssertionError(e.op)
    a, b = e.left, e.right
    da, db = differentiate(a, var), differentiate(b, var)
    if e.op == "add":
        return add(da, db)
    if e.op == "sub":
        return sub(da, db)
    if e.op == "mul":
        return add(mul(da, b), mul(a, db))
    # quotient rule
    return div(sub(mul(da, b), mul(a, db)), mul(b, b))


# ------------------------------------------------------------- evaluation

_MATH = {"sin": math.sin, "cos": math.cos, "tanh": math.tanh, "exp": math.exp, "abs": abs}


def evaluate(e: Expr, t: float, x: float, y: float) -> float:
    """Evaluate ``e`` at a single point; raises ``EvaluationError`` on a non-finite result."""
    env = {"t": float(t), "x": float(x), "y": float(y)}

    def ev(n):
        if isinstance(n, Const):
            return n.value
        if isinstance(n, Var):
            return env[n.name]
        if isinstance(n, Unary):
            a = ev(n.arg)
            if n.op == "neg":
                return -a
            try:
                r = _MATH[n.op](a)
            except OverflowError:
                raise EvaluationError(f"overflow in {n.op}", t, x, y) from None
        else:
            a, b = ev(n.left), ev(n.right)
            if n.op == "add":
                r = a + b
            elif n.op == "sub":
                r = a - b
            elif n.op == "mul":
                r = a * b
            else:
                if b == 0.0:
                    raise EvaluationError("division by zero", t, x, y)
                r = a / b
        if not math.isfinite(r):
            raise EvaluationError("non-finite value", t, x, y)
        return r

    return ev(e)


def to_source(e: Expr, lib: str = "np") -> str:
    """Fully parenthesised Python source for ``e`` using ``np`` or ``math`` functions."""
    if isinstance(e, Const):
        return repr(float(e.value))
    if isinstance(e, Var):
        return e.name
    if isinstance(e, Unary):
        inner = to_source(e.arg, lib)
        if e.op == "neg":
            return f"(-{inner})"
        if e.op == "abs":
            return f"np.abs({inner})" if lib == "np" else f"abs({inner})"
        return f"{lib}.{e.op}({inner})"
    return f"({to_source(e.left, lib)} {_SYMBOL[e.op]} {to_source(e.right, lib)})"


_JIT_CACHE: dict = {}


def _compile_jit(source):
    fn = _JIT_CACHE.get(source)
    if fn is None:
        ns = {"math": math, "np": np}
        exec(f"def _coef(t, x, y):\n    return {source}\n", ns)
        fn = numba.njit(nogil=True, error_model="numpy")(ns["_coef"])
        _JIT_CACHE[source] = fn
    return fn


class Field:
    """A compiled scalar function of ``(t, x, y)``.

    ``vec`` evaluates on broadcast numpy arrays (non-finite values are returned,
    not raised); ``jit`` is a numba scalar function for the flow kernels.
    """

    def __init__(self, expr: Expr):
        self.expr = expr
        self.is_zero = _is_const(expr, 0.0)

    def __repr__(self):
        return f"Field({format_expr(self.expr)!r})"

    @cached_property
    def _vec_fn(self):
        ns = {"np": np}
        exec(f"def _coef(t, x, y):\n    return {to_source(self.expr, 'np')}\n", ns)
        return ns["_coef"]

    def vec(self, t, x, y):
        t, x, y = np.broadcast_arrays(
            np.asarray(t, dtype=float), np.asarray(x, dtype=float), np.asarray(y, dtype=float)
        )
        with np.errstate(all="ignore"):
            out = self._vec_fn(t, x, y)
        return np.broadcast_to(np.asarray(out, dtype=float), t.shape).copy()

    __call__ = vec

    @cached_property
    def jit(self):
        return _compile_jit(to_source(self.expr, "math"))


class _LazyField:
    """A ``Field`` built on first use, so that a symbolic derivative is only
    taken (and an ``abs`` rejected) when something actually needs it."""

    def __init__(self, make):
        self._make = make

    @cached_property
    def field(self) -> Field:
        return self._make()

    @property
    def expr(self):
        return self.field.expr

    @property
    def is_zero(self):
        return self.field.is_zero

    @property
    def jit(self):
        return self.field.jit

    def vec(self, t, x, y):
        return self.field.vec(t, x, y)

    __call__ = vec


@dataclass(frozen=True)
class Diffusion:
    """A diffusion coefficient with its three partial derivatives, as compiled fields.

    Anything exposing ``vec``, ``jit`` and ``is_zero`` can stand in for a
    ``Field`` (the mollified coefficients do).
    """

    value: object
    dt: object
    dx: object
    dy: object
    label: str = ""


# ---------------------------------------------------------- coefficients

def _as_expr(e):
    return parse(e) if isinstance(e, str) else e


@dataclass(frozen=True)
class AuditReport:
    box: tuple
    points: int
    max_abs: dict
    max_quotient: dict


@dataclass(frozen=True)
class CoefficientSet:
    """Drift ``b``, ``d<B>``-drift ``h`` and diffusion ``sigma`` of a scalar G-SDE.

    ``lipschitz_K`` and ``bound_M`` are user-asserted metadata; ``audit`` checks
    them on a finite box.  Derivatives of ``sigma`` are built lazily so that an
    ``abs``-containing sigma is usable wherever no derivative is needed.
    """

    b: Expr
    h: Expr
    sigma: Expr
    lipschitz_K: float = 1.0
    bound_M: float = 1.0
    _fields: dict = field(default_factory=dict, compare=False, repr=False)

    @classmethod
    def from_strings(cls, b="0", h="0", sigma="0", lipschitz_K=1.0, bound_M=1.0):
        if lipschitz_K <= 0 or bound_M <= 0:
            raise ValidationError("lipschitz_K and bound_M must be positive")
        return cls(_as_expr(b), _as_expr(h), _as_expr(sigma), float(lipschitz_K), float(bound_M))

    @cached_property
    def sigma_dt(self):
        return differentiate(self.sigma, "t")

    @cached_property
    def sigma_dx(self):
        return differentiate(self.sigma, "x")

    @cached_property
    def sigma_dy(self):
        return differentiate(self.sigma, "y")

    def _field(self, name):
        f = self._fields.get(name)
        if f is None:
            f = self._fields[name] = Field(getattr(self, name))
        return f

    @property
    def b_field(self):
        return self._field("b")

    @property
    def h_field(self):
        return self._field("h")

    @property
    def sigma_field(self):
        return self._field("sigma")

    @cached_property
    def diffusion(self) -> Diffusion:
        return Diffusion(
            value=self._field("sigma"),
            dt=_LazyField(lambda: self._field("sigma_dt")),
            dx=_LazyField(lambda: self._field("sigma_dx")),
            dy=_LazyField(lambda: self._field("sigma_dy")),
            label=format_expr(self.sigma),
        )

    def depends_on(self, var):
        return any(var in free_vars(e) for e in (self.b, self.h, self.sigma))

    def audit(self, T, x_bar, y_bar, points=10_000, seed=0, slack=1.05):
        """Check ``|b|, |h|, |sigma| <= bound_M`` and difference quotients ``<= slack*K``.

        Samples ``points`` locations in ``[0,T] x [-x_bar,x_bar] x [-y_bar,y_bar]``;
        quotients are taken along each coordinate direction.  Raises
        ``AuditError`` on the first violated coefficient.  Sound on the sample only.
        """
        rng = np.random.default_rng(seed)
        t = rng.uniform(0.0, T, points)
        x = rng.uniform(-x_bar, x_bar, points)
        y = rng.uniform(-y_bar, y_bar, points)
        scale = {"t": T, "x": x_bar, "y": y_bar}
        max_abs, max_q = {}, {}
        for name in ("b", "h", "sigma"):
            f = self._field(name)
            vals = f.vec(t, x, y)
            if not np.all(np.isfinite(vals)):
                k = int(np.argmax(~np.isfinite(vals)))
                raise AuditError(f"{name} is non-finite at (t,x,y)=({t[k]}, {x[k]}, {y[k]})")
            k = int(np.argmax(np.abs(vals)))
            max_abs[name] = float(abs(vals[k]))
            if max_abs[name] > self.bound_M:
                raise AuditError(
                    f"|{name}|={max_abs[name]:.6g} exceeds bound_M={self.bound_M} "
                    f"at (t,x,y)=({t[k]:.6g}, {x[k]:.6g}, {y[k]:.6g})"
                )
            worst = 0.0
            for var in VARIABLES:
                step = rng.uniform(1e-4, 1.0, points) * scale[var] * rng.choice([-1.0, 1.0], points)
                shifted = {"t": t, "x": x, "y": y}
                shifted[var] = shifted[var] + step
                q = np.abs(f.vec(shifted["t"], shifted["x"], shifted["y"]) - vals) / np.abs(step)
                k = int(np.argmax(q))
                worst = max(worst, float(q[k]))
                if q[k] > slack * self.lipschitz_K:
                    raise AuditError(
                        f"difference quotient of {name} in {var} is {q[k]:.6g} > "
                        f"{slack}*K={slack * self.lipschitz_K:.6g} near "
                        f"(t,x,y)=({t[k]:.6g}, {x[k]:.6g}, {y[k]:.6g})"
                    )
            max_q[name] = worst
        return AuditReport((T, x_bar, y_bar), points, max_abs, max_q)
