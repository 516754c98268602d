from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from priorsr.expr import (
    BINARY_OPS,
    UNARY_OPS,
    Binary,
    Const,
    EvalGuard,
    ExprSyntaxError,
    GuardViolation,
    Param,
    UnboundVariableError,
    Unary,
    Var,
    depth,
    evaluate,
    free_vars,
    length,
    parse,
    serialize,
)


def test_parse_structure():
    got = parse("p0*sin(t) - p1*v^3")
    want = Binary(
        "sub",
        Binary("mul", Param(0), Unary("sin", Var("t"))),
        Binary("mul", Param(1), Binary("pow", Var("v"), Const(3.0))),
    )
    assert got == want
    assert parse("p0") == Param(0)


def test_parse_whitespace_insensitive():
    assert parse("p0 * ( x + 1 )") == parse("p0*(x+1)")


def test_canonical_serialize():
    assert serialize(parse("p0 * ( x + 1 )")) == "p0*(x + 1)"
    assert serialize(parse("a - (b - c)")) == "a - (b - c)"
    assert serialize(parse("a - b - c")) == "a - b - c"
    assert serialize(parse("(a^b)^c")) == "(a^b)^c"
    assert serialize(parse("a^b^c")) == "a^b^c"


def test_max_roundtrip():
    e = parse("max(p0*(1 - p1*T), p2)")
    assert e.op == "max"
    assert parse(serialize(e)) == e


def test_power_is_right_associative_and_binds_tighter_than_neg():
    assert parse("2^3^2") == Binary("pow", Const(2.0), Binary("pow", Const(3.0), Const(2.0)))
    assert parse("-x^2") == Unary("neg", Binary("pow", Var("x"), Const(2.0)))
    assert parse("-3") == Const(-3.0)
    assert parse("-3^2") == Unary("neg", Binary("pow", Const(3.0), Const(2.0)))
    assert parse("x**2") == parse("x^2")


@pytest.mark.parametrize(
    "text,pos",
    [("p0*", 3), ("(x + 1", 6), ("x $ y", 2), ("", 0), ("p10", 0), ("foo(x)", 0), ("sin(x, y)", 0)],
)
def test_syntax_errors_carry_position(text, pos):
    with pytest.raises(ExprSyntaxError) as info:
        parse(text)
    assert info.value.position == pos


def test_node_limit():
    text = " + ".join(["x"] * 150)
    with pytest.raises(ExprSyntaxError):
        parse(text)
    assert length(parse(text, max_nodes=None)) == 299


def test_free_vars_length():
    assert free_vars(parse("p0*sin(t) - x*v")) == {"t", "x", "v"}
    assert length(Param(0)) == 1
    assert depth(parse("sin(x)")) == 2


def test_evaluate_basic():
    out = evaluate(parse("p0*x"), {"x": [1, 2, 3]}, [2.0])
    np.testing.assert_array_equal(out, [2, 4, 6])


def test_evaluate_broadcast_constant():
    out = evaluate(parse("p0"), {"x": [1.0, 2.0]}, [3.0])
    np.testing.assert_array_equal(out, [3.0, 3.0])


@pytest.mark.parametrize("text,x", [("log(x)", 0.0), ("1/x", 0.0), ("sqrt(x)", -1.0),
                                    ("x^0.5", -2.0), ("exp(x)", 1000.0)])
def test_guard_violations(text, x):
    with pytest.raises(GuardViolation):
        evaluate(parse(text), {"x": [x]})


def test_unbound_variable():
    with pytest.raises(UnboundVariableError):
        evaluate(parse("x + y"), {"x": [1.0]})


def test_size_guard():
    e = parse(" + ".join(["x"] * 10))
    with pytest.raises(GuardViolation):
        evaluate(e, {"x": [1.0]}, guard=EvalGuard(max_nodes=5))


def test_timeout_guard():
    e = parse(" + ".join(["sin(x)"] * 50))
    with pytest.raises(GuardViolation):
        evaluate(e, {"x": np.ones(10)}, guard=EvalGuard(timeout=-1.0))


def test_osc2_rhs_value():
    e = parse("0.3*sin(t) - 0.5*v^3 - x*v - 5.0*x*exp(0.5*x)")
    out = evaluate(e, {"t": [math.pi / 2], "x": [0.0], "v": [0.0]})
    assert out[0] == pytest.approx(0.3, abs=1e-15)


def test_step_at_zero():
    out = evaluate(parse("step(x)"), {"x": [-1.0, 0.0, 2.0]})
    np.testing.assert_array_equal(out, [0.0, 1.0, 1.0])


def test_constants_round_trip_exactly():
    for v in (0.1, 1 / 3, 1e-300, 6.02214076e23, 2.5, 1e20):
        assert parse(serialize(Const(v))) == Const(v)


# ---------------------------------------------------------------------------
# properties

_VARS = ("x", "y", "t")


def _trees(max_leaves=12):
    leaf = st.one_of(
        st.sampled_from(_VARS).map(Var),
        st.integers(0, 9).map(Param),
        st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False).map(Const),
    )

    def extend(inner):
        return st.one_of(
            st.builds(Unary, st.sampled_from(UNARY_OPS), inner),
            st.builds(Binary, st.sampled_from(BINARY_OPS), inner, inner),
        )

    return st.recursive(leaf, extend, max_leaves=max_leaves)


@settings(max_examples=400, deadline=None)
@given(_trees())
def test_round_trip_property(tree):
    assert parse(serialize(tree), max_nodes=None) == tree


@settings(max_examples=150, deadline=None)
@given(_trees(), st.lists(st.floats(-3, 3), min_size=1, max_size=6))
def test_guard_soundness_and_row_consistency(tree, xs):
    table = {"x": np.array(xs), "y": np.array(xs)[::-1].copy(), "t": np.arange(len(xs), dtype=float)}
    params = np.linspace(0.5, 1.5, 10)
    try:
        full = evaluate(tree, table, params)
    except GuardViolation:
        return
    assert np.all(np.isfinite(full))
    for i in range(len(xs)):
        row = {k: v[i : i + 1] for k, v in table.items()}
        np.testing.assert_array_equal(evaluate(tree, row, params), full[i : i + 1])
    np.testing.assert_array_equal(evaluate(tree, table, params), full)
