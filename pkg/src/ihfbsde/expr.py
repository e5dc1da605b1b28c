"""Scalar expressions in t and coefficient descriptors for run configs.

The grammar is closed: numbers, the variable ``t``, ``+ - * /``, powers with
non-negative integer exponents and ``exp(...)``. That covers constants,
polynomials and profiles such as ``0.5*exp(-2*t)`` and nothing else, so a
config cannot execute code. Descriptors are numbers, expression strings or
nested lists of them; a descriptor with no ``t`` dependence becomes a plain
array, otherwise a callable of t returning an array.
"""

from __future__ import annotations

import ast
import math
from typing import Callable

import numpy as np

from .errors import ValidationError

__all__ = ["ExprError", "parse_expr", "coefficient", "is_time_dependent"]


class ExprError(ValidationError):
    """An expression or descriptor is outside the grammar or has the wrong shape."""


_BINOPS = (ast.Add, ast.Sub, ast.Mult, ast.Div, ast.Pow)


def _check(node: ast.AST) -> bool:
    """Validate the tree; return True when it mentions t."""
    if isinstance(node, ast.Expression):
        return _check(node.body)
    if isinstance(node, ast.Constant):
        if isinstance(node.value, bool) or not isinstance(node.value, (int, float)):
            raise ExprError(f"unsupported constant {node.value!r}")
        return False
    if isinstance(node, ast.Name):
        if node.id != "t":
            raise ExprError(f"unknown name {node.id!r}; only t is allowed")
        return True
    if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.UAdd, ast.USub)):
        return _check(node.operand)
    if isinstance(node, ast.BinOp) and isinstance(node.op, _BINOPS):
        if isinstance(node.op, ast.Pow):
            e = node.right
            if isinstance(e, ast.UnaryOp) or not (isinstance(e, ast.Constant) and isinstance(e.value, int)
                                                   and not isinstance(e.value, bool) and e.value >= 0):
                raise ExprError("powers need a non-negative integer exponent")
        return _check(node.left) | _check(node.right)
    if isinstance(node, ast.Call):
        if not (isinstance(node.func, ast.Name) and node.func.id == "exp") or node.keywords or len(node.args) != 1:
            raise ExprError("the only function is exp(x)")
        return _check(node.args[0])
    raise ExprError(f"unsupported syntax {type(node).__name__}")


def _eval(node: ast.AST, t: float) -> float:
    if isinstance(node, ast.Expression):
        return _eval(node.body, t)
    if isinstance(node, ast.Constant):
        return float(node.value)
    if isinstance(node, ast.Name):
        return t
    if isinstance(node, ast.UnaryOp):
        v = _eval(node.operand, t)
        return -v if isinstance(node.op, ast.USub) else v
    if isinstance(node, ast.BinOp):
        a, b = _eval(node.left, t), _eval(node.right, t)
        op = node.op
        if isinstance(op, ast.Add):
            return a + b
        if isinstance(op, ast.Sub):
            return a - b
        if isinstance(op, ast.Mult):
            return a * b
        if isinstance(op, ast.Div):
            return a / b
        return a ** int(b)
    return math.exp(_eval(node.args[0], t))


def parse_expr(text: str) -> tuple[Callable[[float], float], bool]:
    """Compile ``text``; returns ``(f, depends_on_t)``."""
    try:
        tree = ast.parse(text.strip(), mode="eval")
    except SyntaxError as exc:
        raise ExprError(f"cannot parse expression {text!r}: {exc.msg}") from None
    dep = _check(tree)

    def f(t: float) -> float:
        return _eval(tree, float(t))
    return f, dep


def is_time_dependent(value) -> bool:
    if isinstance(value, str):
        return parse_expr(value)[1]
    if isinstance(value, (list, tuple)):
        return any(is_time_dependent(v) for v in value)
    return False


def _leaves(value, path=()):
    if isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            yield from _leaves(v, path + (i,))
    else:
        yield path, value


def _nested_shape(value) -> tuple:
    if isinstance(value, (list, tuple)):
        if not value:
            return (0,)
        inner = [_nested_shape(v) for v in value]
        if any(s != inner[0] for s in inner):
            raise ExprError("ragged nested list")
        return (len(value),) + inner[0]
    return ()


def coefficient(value, shape: tuple, name: str = "coefficient"):
    """Turn a descriptor into an array of ``shape`` or a callable of t returning one.

    A single number or expression fills an array of size one; otherwise the
    nesting must match ``shape`` exactly.
    """
    shape = tuple(int(s) for s in shape)
    size = int(np.prod(shape)) if shape else 1
    if value is None:
        return np.zeros(shape)
    vshape = _nested_shape(value)
    if vshape != shape:
        if int(np.prod(vshape)) == 1 and size == 1:
            value = [v for _, v in _leaves(value)][0]
            vshape = ()
        else:
            raise ExprError(f"{name}: shape {vshape} does not match expected {shape}")
    leaves = list(_leaves(value))
    consts = np.zeros(size)
    funcs = []
    for j, (_, v) in enumerate(leaves):
        if isinstance(v, bool) or not isinstance(v, (int, float, str)):
            raise ExprError(f"{name}: entries must be numbers or expressions, got {v!r}")
        if isinstance(v, str):
            f, dep = parse_expr(v)
            if dep:
                funcs.append((j, f))
            else:
                consts[j] = f(0.0)
        else:
            consts[j] = float(v)
    if not funcs:
        return consts.reshape(shape)

    def at(t: float) -> np.ndarray:
        out = consts.copy()
        for j, f in funcs:
            out[j] = f(t)
        return out.reshape(shape)
    return at
