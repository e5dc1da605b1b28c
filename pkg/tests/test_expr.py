from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ihfbsde.expr import ExprError, coefficient, is_time_dependent, parse_expr


@pytest.mark.parametrize("text, t, value", [
    ("1.5", 3.0, 1.5),
    ("t", 2.0, 2.0),
    ("exp(-t)", 1.0, math.exp(-1.0)),
    ("0.5*exp(-2*t)", 0.5, 0.5 * math.exp(-1.0)),
    ("t**2 - 3*t + 1", 2.0, -1.0),
    ("-(t + 1) / 4", 3.0, -1.0),
    ("+t", 1.0, 1.0),
])
def test_grammar_values(text, t, value):
    f, _ = parse_expr(text)
    assert f(t) == pytest.approx(value, rel=1e-15)


@pytest.mark.parametrize("text", [
    "x", "sin(t)", "__import__('os')", "t ** -1", "t ** 0.5", "t ** t", "exp(t, 1)", "exp(x=t)", "t if t else 1",
    "[t]", "'a'", "True", "t < 1", "(lambda: 1)()", "t.real", "",
])
def test_grammar_rejects(text):
    with pytest.raises(ExprError):
        parse_expr(text)


def test_time_dependence_flag():
    assert parse_expr("exp(-t)")[1]
    assert not parse_expr("exp(-1) * 2")[1]
    assert is_time_dependent([["1", 2.0], ["t", 0]])
    assert not is_time_dependent([[1.0, "2*3"]])


def test_constant_descriptor_becomes_array():
    a = coefficient([[1, "2*3"], [0.5, "exp(0)"]], (2, 2))
    assert isinstance(a, np.ndarray)
    assert np.array_equal(a, [[1.0, 6.0], [0.5, 1.0]])


def test_time_descriptor_becomes_callable():
    f = coefficient(["exp(-t)", 2.0], (2,))
    assert callable(f)
    assert np.allclose(f(1.0), [math.exp(-1.0), 2.0])


def test_scalar_fills_unit_shape():
    assert coefficient(3.0, (1, 1)).shape == (1, 1)
    assert coefficient([[[2.0]]], (1,))[0] == 2.0


def test_none_is_zero():
    assert np.array_equal(coefficient(None, (2, 3)), np.zeros((2, 3)))


@pytest.mark.parametrize("value, shape", [([1.0, 2.0], (3,)), ([[1.0], [1.0, 2.0]], (2, 2)), (3.0, (2,)),
                                          ([None, 1.0], (2,)), ([True], (1,))])
def test_descriptor_shape_errors(value, shape):
    with pytest.raises(ExprError):
        coefficient(value, shape)


@settings(max_examples=60, deadline=None)
@given(a=st.floats(-50, 50), b=st.floats(-5, 5), t=st.floats(0, 20), k=st.integers(0, 4))
def test_polynomial_exponential_matches_python(a, b, t, k):
    text = f"{a!r} * t**{k} + exp({b!r} * t)"
    f, dep = parse_expr(text)
    assert dep
    assert f(t) == pytest.approx(a * t ** k + math.exp(b * t), rel=1e-12, abs=1e-12)
