"""Solver for the coupled initial condition x = Phi(x + p) with monotone Phi."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import NonConvergenceError, ValidationError

__all__ = ["InitialCoupling", "solve_initial_coupling", "lambda_scan", "monotonicity_probe"]


@dataclass
class InitialCoupling:
    phi: Callable
    lipschitz_C: float
    p: np.ndarray
    tol: float = 1e-12

    def __post_init__(self):
        self.p = np.atleast_1d(np.asarray(self.p, dtype=float))
        if not self.tol > 0:
            raise ValidationError("tol must be positive")
        if self.lipschitz_C < 0:
            raise ValidationError("lipschitz_C must be non-negative")

    @property
    def n(self) -> int:
        return self.p.shape[0]

    def phi_vec(self, y: np.ndarray) -> np.ndarray:
        return np.atleast_1d(np.asarray(self.phi(y), dtype=float))

    def residual(self, x: np.ndarray) -> np.ndarray:
        return x - self.phi_vec(x + self.p)


def monotonicity_probe(phi: Callable, center: np.ndarray, scale: float = 1.0, n_pairs: int = 64,
                       seed: int = 0) -> dict:
    """Sample <Phi(y1) - Phi(y2), y1 - y2> on random pairs near ``center``."""
    rng = np.random.default_rng(seed)
    center = np.atleast_1d(np.asarray(center, dtype=float))
    worst = -np.inf
    violations = 0
    for _ in range(n_pairs):
        y1 = center + scale * rng.standard_normal(center.shape)
        y2 = center + scale * rng.standard_normal(center.shape)
        v = float(np.dot(np.atleast_1d(phi(y1)) - np.atleast_1d(phi(y2)), y1 - y2))
        worst = max(worst, v)
        violations += v > 1e-12 * max(1.0, float(np.dot(y1 - y2, y1 - y2)))
    return {"pairs": n_pairs, "violations": int(violations), "max_inner": worst}


def _bisect(c: InitialCoupling, max_iter: int) -> np.ndarray:
    # lam(x) = Phi(x + p) - x is strictly decreasing; find its root.
    def lam(x):
        return float(c.phi_vec(np.array([x + c.p[0]]))[0]) - x

    start = float(c.phi_vec(c.p)[0])
    width = max(1.0, abs(start))
    lo, hi = start - width, start + width
    it = 0
    while lam(lo) < 0 and it < 200:
        lo = start - (start - lo) * 2.0
        it += 1
    while lam(hi) > 0 and it < 400:
        hi = start + (hi - start) * 2.0
        it += 1
    if lam(lo) < 0 or lam(hi) > 0:
        raise NonConvergenceError("no sign change found for the scalar coupling",
                                  trace=[monotonicity_probe(c.phi, c.p + start, width)])
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        v = lam(mid)
        if abs(v) <= c.tol or hi - lo <= 4 * np.finfo(float).eps * max(1.0, abs(mid)):
            return np.array([mid])
        if v > 0:
            lo = mid
        else:
            hi = mid
    return np.array([0.5 * (lo + hi)])


def solve_initial_coupling(c: InitialCoupling, max_iter: int = 1_000_000, start: np.ndarray | None = None
                           ) -> np.ndarray:
    """Return x with |x - Phi(x + p)| <= tol.

    For n = 1 the root of Phi(x + p) - x is bracketed and bisected. For n > 1
    the strongly monotone map F(x) = x - Phi(x + p) is driven to zero by
    x <- x - tau F(x), tau = 1/(1+C)^2.
    """
    if c.n == 1 and start is None:
        x = _bisect(c, max_iter=max(200, min(max_iter, 10_000)))
    else:
        tau = 1.0 / (1.0 + c.lipschitz_C) ** 2
        x = c.phi_vec(c.p) if start is None else np.atleast_1d(np.asarray(start, dtype=float)).copy()
        for _ in range(max_iter):
            f = c.residual(x)
            if np.linalg.norm(f) <= c.tol:
                break
            x = x - tau * f
        else:
            raise NonConvergenceError(
                f"coupling iteration did not reach tol {c.tol} in {max_iter} steps",
                trace=[monotonicity_probe(c.phi, x + c.p, max(1.0, float(np.linalg.norm(x))))])
    res = float(np.linalg.norm(c.residual(x)))
    if res > c.tol:
        raise NonConvergenceError(f"coupling residual {res} above tol {c.tol}",
                                  trace=[monotonicity_probe(c.phi, x + c.p)])
    return x


def lambda_scan(c: InitialCoupling, x_lo: float, x_hi: float, n_points: int):
    """Samples of lam(x, p) = Phi(x + p) - x on a uniform grid (scalar case only).

    Returns ``(xs, lam)``; monotone Phi satisfies lam x <= -x^2/2 + Phi(p)^2/2.
    """
    if c.n != 1:
        raise ValidationError("lambda_scan supports n = 1 only")
    xs = np.linspace(x_lo, x_hi, n_points)
    lam = np.array([float(c.phi_vec(np.array([x + c.p[0]]))[0]) - x for x in xs])
    return xs, lam
