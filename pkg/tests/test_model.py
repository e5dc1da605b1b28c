from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import scalar_game, scalar_lq
from ihfbsde.errors import ShapeError, ValidationError
from ihfbsde.game import GameSpec
from ihfbsde.lq import LQSpec, assemble_hamiltonian_system
from ihfbsde.model import (
    BsdeParams,
    CoefficientSet,
    MarkSpace,
    ThetaPath,
    TimeGrid,
    VerificationReport,
    box_sampler,
    check_game_assumptions,
    check_gaps,
    check_lq_assumptions,
    commutation_residuals,
    estimate_monotonicity,
    weighted_norm_sq,
)


def _theta(M, T, n=1, d=1, rates=((1.0,),), fill=0.0, x=True):
    rates = np.asarray(rates, dtype=float)
    l, m = rates.shape
    a = lambda *s: np.full(s, fill)
    return ThetaPath(a(M, T, n) if x else None, a(M, T, n), a(M, T, n, d), a(M, T, n, l, m), rates)


def test_grid_basics():
    g = TimeGrid(2.0, 8)
    assert g.dt == 0.25
    assert g.times[0] == 0.0 and np.all(np.diff(g.times) > 0)
    assert TimeGrid.from_dt(1.0, 0.1).n_steps == 10
    with pytest.raises(ValidationError):
        TimeGrid(0.0, 4)
    with pytest.raises(ValidationError):
        TimeGrid(1.0, 0)


def test_mark_space_rejects_negative_rates():
    with pytest.raises(ValidationError):
        MarkSpace(np.array([[-1.0]]))
    ms = MarkSpace(np.array([[1.0, 0.5]]))
    assert (ms.l, ms.m) == (1, 2)
    assert MarkSpace.empty().l == 0


def test_theta_shape_mismatch():
    with pytest.raises(ShapeError):
        ThetaPath(np.zeros((2, 5, 1)), np.zeros((2, 4, 1)), np.zeros((2, 4, 1, 0)), np.zeros((2, 4, 1, 0, 0)))


def test_norm_of_zero_path():
    g = TimeGrid(1.0, 10)
    assert weighted_norm_sq(_theta(3, 11), 1.0, g) == 0.0


@pytest.mark.parametrize("n_steps", [1, 7, 100])
def test_norm_of_constant_y(n_steps):
    g = TimeGrid(1.0, n_steps)
    th = _theta(2, n_steps + 1, d=0, rates=np.zeros((0, 0)), x=False)
    th.y[:] = 1.0
    assert weighted_norm_sq(th, 0.0, g) == pytest.approx(1.0, abs=1e-12)


def test_norm_of_decaying_path():
    g = TimeGrid(10.0, 10_000)
    th = _theta(1, g.n_steps + 1, d=0, rates=np.zeros((0, 0)), x=False)
    th.y[0, :, 0] = np.exp(-g.times)
    assert weighted_norm_sq(th, 1.0, g) == pytest.approx(1 - np.exp(-10.0), abs=1e-2)


def test_norm_grid_mismatch():
    with pytest.raises(ShapeError):
        weighted_norm_sq(_theta(1, 5), 0.0, TimeGrid(1.0, 10))


def test_norm_counts_jump_intensity():
    g = TimeGrid(1.0, 4)
    th = _theta(1, 5, rates=((2.0,),), x=False)
    th.r[:] = 1.0
    # |r|^2 weighted by the intensity 2
    assert weighted_norm_sq(th, 0.0, g) == pytest.approx(2.0)


@settings(max_examples=30, deadline=None)
@given(c=st.floats(-10, 10), seed=st.integers(0, 1000))
def test_norm_is_homogeneous(c, seed):
    g = TimeGrid(2.0, 20)
    rng = np.random.default_rng(seed)
    rates = np.array([[0.5, 1.5]])
    th = ThetaPath(rng.normal(size=(3, 21, 2)), rng.normal(size=(3, 21, 2)), rng.normal(size=(3, 21, 2, 1)),
                   rng.normal(size=(3, 21, 2, 1, 2)), rates)
    base = weighted_norm_sq(th, 0.7, g)
    assert weighted_norm_sq(th.scaled(c), 0.7, g) == pytest.approx(c * c * base, rel=1e-12, abs=1e-300)


def _linear_set(G: np.ndarray) -> CoefficientSet:
    """A(theta) = -G theta on the (x, y) block, n = 1, no noise."""

    def g(t, x, y, z, r):
        return G[0, 0] * x + G[0, 1] * y

    def b(t, x, y, z, r):
        return -(G[1, 0] * x + G[1, 1] * y)

    return CoefficientSet(b, None, None, g, lambda y: 0 * y, 1.0, 1.0, 1.0, n=1)


def test_monotonicity_of_negative_identity():
    mu, C = estimate_monotonicity(_linear_set(np.eye(2)), box_sampler(_linear_set(np.eye(2))), 200)
    assert mu == pytest.approx(1.0, abs=1e-12) and C == pytest.approx(1.0, abs=1e-12)


def _exhaustive_sampler(n_dirs=720):
    ang = np.linspace(0, np.pi, n_dirs, endpoint=False)
    x, y = np.cos(ang)[:, None], np.sin(ang)[:, None]
    z = np.zeros((n_dirs, 1, 0))
    r = np.zeros((n_dirs, 1, 0, 0))
    zero = (0 * x, 0 * y, z, r)
    return lambda S: (0.0, (x, y, z, r), zero)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_monotonicity_matches_spectrum(seed):
    # exact for symmetric G: exhaustive directions include the eigenvectors up to angular resolution
    rng = np.random.default_rng(seed)
    lam = np.sort(rng.uniform(0.1, 3.0, 2))
    ang = np.pi / 720 * rng.integers(0, 720)
    c, s = np.cos(ang), np.sin(ang)
    U = np.array([[c, -s], [s, c]])
    G = U @ np.diag(lam) @ U.T
    mu, C = estimate_monotonicity(_linear_set(G), _exhaustive_sampler(), 1)
    assert mu == pytest.approx(lam[0], abs=1e-9) and C == pytest.approx(lam[1], abs=1e-9)


def test_monotonicity_of_lq_example():
    spec = LQSpec(n=1, k=1, d=1, marks=MarkSpace.single(1.0), A=[[0.0]], D=[[1.0]], Q=[[0.0]], L=[[1.0]],
                  M=[[[1.0]]], S=[[[[1.0]]]], R=[[1.0]], K=1.0)
    cs = assemble_hamiltonian_system(spec)
    mu, C = estimate_monotonicity(cs, box_sampler(cs, seed=3), 2000)
    assert mu >= 1 - 1e-9


def test_flipped_sign_reports_negative_mu():
    cs = _linear_set(np.eye(2))
    flipped = cs.replace(g=lambda t, x, y, z, r: -x + y)
    mu, _ = estimate_monotonicity(flipped, box_sampler(flipped), 500)
    assert mu < 0


def test_coincident_samples_rejected():
    cs = _linear_set(np.eye(2))
    z = (np.zeros((4, 1)), np.zeros((4, 1)), np.zeros((4, 1, 0)), np.zeros((4, 1, 0, 0)))
    with pytest.raises(ValidationError):
        estimate_monotonicity(cs, lambda S: (0.0, z, z), 4)


def test_gap_reports():
    cs = _linear_set(np.eye(2))
    reps = check_gaps(cs, BsdeParams(rho=1.0, K=1.0, delta=0.5))
    assert [r.passed for r in reps] == [True, True]
    assert reps[0].detail["gap"] == pytest.approx(1.0)
    assert reps[1].detail["gap"] == pytest.approx(2.5)
    bad = check_gaps(cs.replace(weight_K=2.0))
    assert not bad[0].passed


@settings(max_examples=50, deadline=None)
@given(mu=st.floats(0.01, 5), K=st.floats(0.01, 10))
def test_gap_is_arithmetic(mu, K):
    cs = _linear_set(np.eye(2)).replace(monotone_mu=mu, weight_K=K)
    assert check_gaps(cs)[0].passed == (2 * mu - K > 0)


def test_inequality_rule():
    assert VerificationReport.inequality("a", 1.0, 0.9, 0.04).passed
    assert not VerificationReport.inequality("a", 1.0, 0.9, 0.03).passed


def test_lq_example_assumptions():
    reps = check_lq_assumptions(scalar_lq())
    assert all(r.passed for r in reps)
    gap = [r for r in reps if r.name.startswith("gap")][0]
    assert gap.detail["mu"] == pytest.approx(1.0)


def test_lq_assumption_violations():
    spec = LQSpec(n=1, k=1, A=[[0.0]], D=[[1.0]], Q=[[-1.0]], L=[[1.0]], R=[[1.0]], K=1.0)
    failed = {r.name for r in check_lq_assumptions(spec) if not r.passed}
    assert "Q positive semi-definite" in failed
    spec = LQSpec(n=1, k=1, A=[[0.0]], D=[[1.0]], Q=[[0.0]], L=[[1.0]], R=[[-1.0]], K=1.0)
    failed = {r.name for r in check_lq_assumptions(spec) if not r.passed}
    assert "R positive definite" in failed


def test_lq_rejects_asymmetric_weights():
    spec = LQSpec(n=2, k=2, A=np.zeros((2, 2)), D=np.eye(2), Q=np.zeros((2, 2)), L=[[1.0, 1.0], [0.0, 1.0]],
                  R=np.eye(2), K=1.0)
    with pytest.raises(ValidationError):
        check_lq_assumptions(spec)


def test_game_example_assumptions():
    assert all(r.passed for r in check_game_assumptions(scalar_game()))


def test_game_dissipativity_margin():
    spec = GameSpec(n=1, k=(1, 1), A=[[-1.0]], D=([[1.0]], [[1.0]]), Q=([[0.0]], [[0.0]]),
                    L=([[1.0]], [[1.0]]), R=([[1.0]], [[1.0]]), K=1.0)
    rep = [r for r in check_game_assumptions(spec) if r.name.startswith("dissipativity")][0]
    assert rep.passed
    # 2A + K = -1, so the margin is 1
    assert rep.lhs == pytest.approx(-1.0)


def test_game_commutation_failure():
    A = np.array([[0.0, 1.0], [0.0, -1.0]]) - np.eye(2)
    D1 = np.array([[1.0, 0.0], [0.0, 0.0]])
    spec = GameSpec(n=2, k=(2, 2), A=A, D=(D1, np.eye(2)), Q=(np.zeros((2, 2)),) * 2, L=(np.eye(2),) * 2,
                    R=(np.eye(2),) * 2, K=0.5)
    res = commutation_residuals(spec)
    P1 = D1 @ D1.T
    expected = float(np.max(np.abs(P1 @ A.T - A.T @ P1)))
    assert res["residuals"]["P_1 A^T"] == pytest.approx(expected)
    rep = [r for r in check_game_assumptions(spec) if r.name.startswith("commutation")][0]
    assert not rep.passed and rep.lhs == pytest.approx(expected)
