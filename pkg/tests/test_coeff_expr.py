import math

import numpy as np
import pytest
import sympy
from hypothesis import given, settings
from hypothesis import strategies as st

from gsde.coeff_expr import (
    Binary,
    CoefficientSet,
    Const,
    Field,
    Unary,
    Var,
    differentiate,
    evaluate,
    format_expr,
    free_vars,
    parse,
)
from gsde.errors import (
    ArityError,
    AuditError,
    EvaluationError,
    ExprSyntaxError,
    NonDifferentiableError,
    UnknownIdentifierError,
    ValidationError,
)


# ------------------------------------------------------------------ parse

def test_parse_call():
    assert parse("tanh(y)") == Unary("tanh", Var("y"))


def test_parse_precedence():
    assert parse("1 + 2*x") == Binary("add", Const(1.0), Binary("mul", Const(2.0), Var("x")))


def test_parse_left_associative():
    assert parse("8 - 3 - 2") == Binary("sub", Binary("sub", Const(8.0), Const(3.0)), Const(2.0))
    assert evaluate(parse("8 / 4 / 2"), 0, 0, 0) == 1.0


def test_parse_unary_minus_and_whitespace():
    assert evaluate(parse(" - ( 2 *y )"), 0, 0, 3) == -6.0
    assert evaluate(parse("--y"), 0, 0, 3) == 3.0
    assert evaluate(parse("1.5e-1*t"), 2, 0, 0) == pytest.approx(0.3)


def test_unbalanced_paren_offset():
    with pytest.raises(ExprSyntaxError) as info:
        parse("sin(t")
    assert info.value.offset == 5
    assert "offset 5" in str(info.value)


@pytest.mark.parametrize(
    "src,exc",
    [
        ("", ExprSyntaxError),
        ("1 +", ExprSyntaxError),
        ("(y", ExprSyntaxError),
        ("y)", ExprSyntaxError),
        ("2 $ y", ExprSyntaxError),
        ("z + 1", UnknownIdentifierError),
        ("log(y)", UnknownIdentifierError),
        ("sin(x, y)", ArityError),
        ("sin()", ArityError),
        ("sin", ArityError),
        ("y(2)", ExprSyntaxError),
    ],
)
def test_parse_errors(src, exc):
    with pytest.raises(exc):
        parse(src)


def test_error_offsets_point_at_fault():
    with pytest.raises(UnknownIdentifierError) as info:
        parse("1 + foo")
    assert info.value.offset == 4


# ------------------------------------------------------------- evaluate

def test_evaluate_examples():
    assert evaluate(parse("2+3*y"), 0, 0, 4) == 14.0
    assert evaluate(parse("exp(x)"), 0, 0, 0) == 1.0
    with pytest.raises(EvaluationError, match="division by zero"):
        evaluate(parse("y/(t-t)"), 1.0, 2.0, 3.0)


def test_evaluate_overflow_reports_inputs():
    with pytest.raises(EvaluationError) as info:
        evaluate(parse("exp(exp(y))"), 0.0, 0.0, 10.0)
    assert info.value.y == 10.0


def test_field_matches_scalar_evaluation(rng):
    e = parse("sin(t)*y - x/(2 + tanh(y)) + abs(x - y) + exp(-y*y)*cos(x)")
    pts = rng.uniform(-2, 2, (3, 50))
    f = Field(e)
    vec = f.vec(*pts)
    jit = np.array([f.jit(*p) for p in pts.T])
    ref = np.array([evaluate(e, *p) for p in pts.T])
    np.testing.assert_allclose(vec, ref, rtol=1e-14, atol=1e-14)
    np.testing.assert_allclose(jit, ref, rtol=1e-14, atol=1e-14)


# ---------------------------------------------------------- differentiate

def test_derivative_examples():
    d = differentiate(parse("tanh(y)"), "y")
    for y in np.linspace(-3, 3, 13):
        assert evaluate(d, 0, 0, y) == pytest.approx(1 - math.tanh(y) ** 2, rel=1e-14)
    assert differentiate(parse("x*y"), "t") == Const(0.0)
    assert evaluate(differentiate(parse("y*sin(t)"), "y"), math.pi / 2, 0, 3) == 1.0


def test_abs_rejected_only_through_its_variable():
    with pytest.raises(NonDifferentiableError):
        differentiate(parse("abs(y) + 1"), "y")
    assert differentiate(parse("abs(t)*y"), "y") == parse("abs(t)")
    assert differentiate(parse("abs(y)"), "x") == Const(0.0)


# Random expression trees: no abs, and division only by expressions bounded away from zero.
leaves = st.one_of(
    st.sampled_from([Var("t"), Var("x"), Var("y")]),
    st.floats(-2, 2, allow_nan=False).map(lambda v: Const(round(v, 3))),
)


def _extend(children):
    safe_den = children.map(lambda c: Binary("add", Const(2.5), Unary("tanh", c)))
    return st.one_of(
        st.tuples(st.sampled_from(["neg", "sin", "cos", "tanh"]), children).map(lambda a: Unary(*a)),
        children.map(lambda c: Unary("exp", Unary("tanh", c))),
        st.tuples(st.sampled_from(["add", "sub", "mul"]), children, children).map(lambda a: Binary(*a)),
        st.tuples(children, safe_den).map(lambda a: Binary("div", *a)),
    )


trees = st.recursive(leaves, _extend, max_leaves=12)


def _depth(e):
    return 1 + max((_depth(c) for c in e.children), default=0)


points = st.tuples(*[st.floats(-1, 1, allow_nan=False)] * 3)


@settings(max_examples=150, deadline=None)
@given(trees, points, st.sampled_from(["t", "x", "y"]))
def test_derivative_matches_finite_differences(e, p, var):
    if _depth(e) > 6:
        return
    d = evaluate(differentiate(e, var), *p)
    h = 1e-6
    idx = "txy".index(var)
    up, dn = list(p), list(p)
    up[idx] += h
    dn[idx] -= h
    fd = (evaluate(e, *up) - evaluate(e, *dn)) / (2 * h)
    scale = max(1.0, abs(evaluate(e, *p)))
    assert abs(d - fd) <= 1e-6 * max(1.0, abs(d)) + 1e-9 * scale


def _to_sympy(e, syms):
    if isinstance(e, Const):
        return sympy.Float(e.value, 30)
    if isinstance(e, Var):
        return syms[e.name]
    if isinstance(e, Unary):
        a = _to_sympy(e.arg, syms)
        return -a if e.op == "neg" else getattr(sympy, e.op)(a)
    a, b = _to_sympy(e.left, syms), _to_sympy(e.right, syms)
    if e.op == "add":
        return a + b
    if e.op == "sub":
        return a - b
    return a * b if e.op == "mul" else a / b


@settings(max_examples=60, deadline=None)
@given(trees, points, st.sampled_from(["t", "x", "y"]))
def test_derivative_matches_computer_algebra(e, p, var):
    syms = {n: sympy.Symbol(n) for n in "txy"}
    ref = sympy.diff(_to_sympy(e, syms), syms[var])
    val = float(ref.evalf(subs=dict(zip((syms["t"], syms["x"], syms["y"]), p))))
    got = evaluate(differentiate(e, var), *p)
    assert got == pytest.approx(val, rel=1e-10, abs=1e-10)


# -------------------------------------------------------------- printing

@settings(max_examples=150, deadline=None)
@given(trees)
def test_round_trip(e):
    again = parse(format_expr(e))
    pts = np.random.default_rng(0).uniform(-2, 2, (100, 3))
    for p in pts:
        a, b = evaluate(e, *p), evaluate(again, *p)
        assert a == pytest.approx(b, rel=1e-12, abs=1e-300)
    assert free_vars(again) == free_vars(e)


def test_format_examples():
    assert format_expr(parse("1 - (2 - y)")) == "1.0 - (2.0 - y)"
    assert format_expr(parse("(1 + y)*x")) == "(1.0 + y) * x"
    assert format_expr(parse("-(y*2)")) == "-(y * 2.0)"


# ------------------------------------------------------ coefficient sets

def test_coefficient_set_derivatives():
    cs = CoefficientSet.from_strings(b="sin(y)", h="0", sigma="t*y + x*x")
    assert evaluate(cs.sigma_dt, 0, 2, 3) == 3.0
    assert evaluate(cs.sigma_dx, 0, 2, 3) == 4.0
    assert evaluate(cs.sigma_dy, 0.5, 2, 3) == 0.5
    assert cs.depends_on("t") and cs.depends_on("x")
    assert not CoefficientSet.from_strings(sigma="y").depends_on("t")


def test_abs_sigma_allowed_until_differentiated():
    cs = CoefficientSet.from_strings(sigma="abs(y) + 1")
    assert cs.sigma_field.vec(0, 0, -2.0) == 3.0
    with pytest.raises(NonDifferentiableError):
        cs.diffusion.dy.vec(0.0, 0.0, 1.0)


def test_metadata_must_be_positive():
    with pytest.raises(ValidationError):
        CoefficientSet.from_strings(lipschitz_K=0)


def test_audit_passes_on_valid_metadata():
    cs = CoefficientSet.from_strings(b="sin(y)", h="0.5*cos(x)", sigma="1 + 0.5*tanh(y)",
                                     lipschitz_K=1.0, bound_M=1.5)
    report = cs.audit(1.0, 3.0, 3.0)
    assert report.max_abs["sigma"] <= 1.5
    assert report.max_quotient["b"] <= 1.05


def test_audit_fails_fast_on_wrong_metadata():
    with pytest.raises(AuditError, match="bound_M"):
        CoefficientSet.from_strings(b="3*sin(y)", bound_M=1.0, lipschitz_K=5).audit(1, 1, 3)
    with pytest.raises(AuditError, match="difference quotient"):
        CoefficientSet.from_strings(b="sin(4*y)", bound_M=1.0, lipschitz_K=1.0).audit(1, 1, 3)
