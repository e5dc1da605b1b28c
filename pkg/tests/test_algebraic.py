from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ihfbsde.algebraic import InitialCoupling, lambda_scan, monotonicity_probe, solve_initial_coupling
from ihfbsde.errors import NonConvergenceError, ValidationError

# Real root of x + (x + 1)^3 = 0, from a 200-step bisection on [-1, 0] and numpy.roots.
CUBIC_ROOT = -0.3176721961719807


def test_zero_map():
    for p in (-3.0, 0.0, 2.5):
        assert solve_initial_coupling(InitialCoupling(lambda y: 0 * y, 0.0, [p]))[0] == 0.0


def test_linear_scalar():
    x = solve_initial_coupling(InitialCoupling(lambda y: -y, 1.0, [2.0]))
    assert x[0] == pytest.approx(-1.0, abs=1e-12)


def test_cubic_roots():
    phi = lambda y: -np.asarray(y) ** 3
    assert solve_initial_coupling(InitialCoupling(phi, 3.0, [0.0]))[0] == pytest.approx(0.0, abs=1e-12)
    x = solve_initial_coupling(InitialCoupling(phi, 3.0, [1.0], tol=1e-13))
    assert x[0] == pytest.approx(CUBIC_ROOT, abs=1e-9)
    assert np.polyval([1, 3, 4, 1], CUBIC_ROOT) == pytest.approx(0.0, abs=1e-12)


def test_vector_linear_matches_closed_form():
    rng = np.random.default_rng(0)
    G = rng.normal(size=(3, 3))
    Q = G @ G.T
    p = rng.normal(size=3)
    x = solve_initial_coupling(InitialCoupling(lambda y: -Q @ y, np.linalg.norm(Q, 2), p, tol=1e-12))
    assert np.allclose(x, -np.linalg.solve(np.eye(3) + Q, Q @ p), atol=1e-10)


def test_iteration_cap_raises_with_probe():
    Q = np.diag([50.0, 1.0])
    c = InitialCoupling(lambda y: -Q @ y, 50.0, [1.0, 1.0], tol=1e-14)
    with pytest.raises(NonConvergenceError) as err:
        solve_initial_coupling(c, max_iter=3)
    assert "violations" in err.value.trace[0]


def test_invalid_inputs():
    with pytest.raises(ValidationError):
        InitialCoupling(lambda y: y, 1.0, [0.0], tol=0.0)
    with pytest.raises(ValidationError):
        lambda_scan(InitialCoupling(lambda y: y, 1.0, [0.0, 1.0]), -1, 1, 5)


def test_lambda_scan_examples():
    xs, lam = lambda_scan(InitialCoupling(lambda y: 0 * y, 0.0, [0.7]), -2, 2, 9)
    assert np.allclose(lam, -xs)
    xs, lam = lambda_scan(InitialCoupling(lambda y: -np.asarray(y), 1.0, [0.0]), -2, 2, 9)
    assert np.allclose(lam, -2 * xs) and np.all(lam * xs <= -xs ** 2 / 2)
    phi = lambda y: -np.asarray(y) ** 3
    xs, lam = lambda_scan(InitialCoupling(phi, 3.0, [1.0]), -3, 3, 61)
    assert np.all(lam * xs <= -xs ** 2 / 2 + phi(1.0) ** 2 / 2 + 1e-12)


def test_probe_flags_increasing_map():
    assert monotonicity_probe(lambda y: y, np.zeros(2))["violations"] > 0
    assert monotonicity_probe(lambda y: -y, np.zeros(2))["violations"] == 0


_MAPS = {
    "cubic": (lambda y: -np.asarray(y) ** 3, None),
    "tanh": (lambda y: -np.tanh(y) - np.asarray(y), 2.0),
}


@settings(max_examples=40, deadline=None)
@given(p=st.floats(-10, 10), name=st.sampled_from(sorted(_MAPS)))
def test_scalar_residual_and_uniqueness(p, name):
    phi, C = _MAPS[name]
    if C is None:
        # y = x + p solves y + y^3 = p, so |y| <= min(|p|, |p|^(1/3)); bound Phi' on a unit neighbourhood
        C = 3 * (min(abs(p), abs(p) ** (1 / 3)) + 1.5) ** 2
    c = InitialCoupling(phi, C, [p], tol=1e-10)
    x = solve_initial_coupling(c)
    assert abs(x[0] - phi(x[0] + p)) <= 1e-10
    # a second start through the fixed-step iteration
    x2 = solve_initial_coupling(c, start=np.array([x[0] + 0.5]))
    assert abs(x2[0] - x[0]) <= 2e-10


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 4))
def test_coercivity_and_residual_vector(seed, n):
    rng = np.random.default_rng(seed)
    G = rng.normal(size=(n, n))
    Q = G @ G.T
    phi = lambda y: -Q @ np.asarray(y)
    p = rng.normal(size=n) * 3
    x = solve_initial_coupling(InitialCoupling(phi, float(np.linalg.norm(Q, 2)), p, tol=1e-10))
    assert np.linalg.norm(x - phi(x + p)) <= 1e-10
    for xx in rng.normal(size=(20, n)) * 5:
        lam = phi(xx + p) - xx
        assert lam @ xx <= -xx @ xx / 2 + phi(p) @ phi(p) / 2 + 1e-9
