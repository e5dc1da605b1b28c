from __future__ import annotations

import sys

import numpy as np
import pytest

from ihfbsde.game import GameSpec
from ihfbsde.lq import LQSpec
from ihfbsde.model import CoefficientSet, MarkSpace, TimeGrid
from ihfbsde.noise import NoiseSpec, generate


def scalar_system(mu: float = 1.0, a: float = 1.0, rate: float = 1.0, K: float = 0.5,
                  phi_slope: float = 0.5, shift: float = 0.0) -> CoefficientSet:
    """Scalar monotone coupled system with additive noise and a bounded nonlinearity.

    A(theta) = (-g, b, sigma, gamma) has monotonicity constant mu: the
    cross terms a x y cancel and the tanh parts are monotone.
    """

    def g(t, x, y, z, r):
        return mu * x - a * y + 0.5 * np.tanh(x) + np.exp(-t)

    def b(t, x, y, z, r):
        return -mu * y - a * x - 0.5 * np.tanh(y)

    def sigma(t, x, y, z, r):
        return (-mu * z[:, :, 0] + 0.3)[:, :, None]

    def gamma(t, x, y, z, r):
        return (-mu * r[:, :, 0, 0] + 0.2)[:, :, None, None]

    return CoefficientSet(b, sigma, gamma, g, lambda y: -phi_slope * np.asarray(y) + shift, lipschitz_C=3.0,
                          monotone_mu=mu, weight_K=K, n=1, d=1, marks=MarkSpace.single(rate),
                          name="scalar-monotone")


def scalar_lq(Q: float = 0.0, B: float = 0.0, C: float = 0.0, alpha=True, A: float = -1.0, K: float = 1.0) -> LQSpec:
    """Scalar control data with D = R = L = M = S = 1."""
    al = (lambda t: np.array([np.exp(-t)])) if alpha else None
    return LQSpec(n=1, k=1, d=1, marks=MarkSpace.single(1.0), A=[[A]], B=[[[B]]], C=[[[[C]]]], D=[[1.0]],
                  Q=[[Q]], L=[[1.0]], M=[[[1.0]]], S=[[[[1.0]]]], R=[[1.0]], K=K, alpha=al)


def scalar_game(D2: float = 1.0, symmetric: bool = False, alpha=True) -> GameSpec:
    """Two-player scalar game with A = -1 < -B^2/2 - C^2 pi/2."""
    R2, Q2 = (1.0, 1.0) if symmetric else (2.0, 0.5)
    al = (lambda t: np.array([np.exp(-t)])) if alpha else None
    return GameSpec(n=1, k=(1, 1), d=1, marks=MarkSpace.single(1.0), A=[[-1.0]], B=[[[0.3]]], C=[[[[0.2]]]],
                    D=([[1.0]], [[D2]]), R=([[1.0]], [[R2]]), Q=([[1.0]], [[Q2]]), L=([[1.0]], [[1.0]]),
                    M=([[[1.0]]], [[[1.0]]]), S=([[[[1.0]]]], [[[[1.0]]]]), K=0.5, mu=0.5 if D2 else None,
                    alpha=al)


def noise_for(grid: TimeGrid, M: int = 128, seed: int = 0, d: int = 1, rate: float | None = 1.0):
    marks = MarkSpace.single(rate) if rate is not None else MarkSpace.empty()
    return generate(NoiseSpec(d, marks, M, grid, seed))


@pytest.fixture
def small_grid() -> TimeGrid:
    return TimeGrid(4.0, 80)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
