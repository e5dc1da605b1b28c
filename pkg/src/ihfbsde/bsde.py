"""Infinite-horizon backward SDEs with Brownian and compensated Poisson noise.

The backward equation is

    -dy = [G(t, y, z, r) + phi(t)] dt - z dW - sum r dN~,

solved on a truncated grid by an implicit backward Euler step

    y_k = E_k[y_{k+1}] + dt (G(t_k, y_k, z_k, r_k) + phi_k),

with z and r read off the martingale increments. Conditional expectations
are least-squares projections on a quadratic polynomial basis of the
current state (forward variable, cumulative W and cumulative compensated
jumps). When every input is the same on all paths the solver switches to a
single-path deterministic mode where z = r = 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import (
    AssumptionError,
    ComparabilityError,
    ConvergenceError,
    ShapeError,
    StepSizeError,
    ValidationError,
)
from .model import BsdeParams, MarkSpace, ThetaPath, TimeGrid, VerificationReport, jump_sq
from .noise import NoiseBundle, NoiseSpec, generate

__all__ = [
    "BsdeDriver",
    "BsdeSolution",
    "Projector",
    "solve_finite",
    "solve_infinite",
    "deterministic_oracle",
    "apriori_check",
    "decay_diagnostic",
    "decays",
    "backward_residual",
    "default_schedule",
]

FIXED_POINT_ITERS = 50
FIXED_POINT_TOL = 1e-12


@dataclass
class BsdeDriver:
    """Driver G with G(t, 0, 0, 0) = 0 and inhomogeneity phi.

    ``G(t, y, z, r)`` acts on a batch: y (M, m), z (M, m, d), r (M, m, l, mm).
    When ``state_dependent`` is set the call is ``G(t, y, z, r, x)`` with the
    forward state x (M, n) at that grid point. ``phi`` may be a callable of t,
    an array (N+1, m) or an adapted array (M, N+1, m); ``None`` means zero.
    """

    G: Callable
    phi: Callable | np.ndarray | None
    params: BsdeParams
    m: int = 1
    state_dependent: bool = False

    def with_phi(self, phi) -> "BsdeDriver":
        return BsdeDriver(self.G, phi, self.params, self.m, self.state_dependent)


def phi_values(phi, grid: TimeGrid, m: int) -> np.ndarray:
    """Inhomogeneity on the grid as (P, N+1, m) with P = 1 for deterministic inputs."""
    T = grid.n_steps + 1
    if phi is None:
        return np.zeros((1, T, m))
    if callable(phi):
        vals = np.array([np.broadcast_to(np.asarray(phi(t), dtype=float), (m,)) for t in grid.times])
        return vals[None]
    a = np.asarray(phi, dtype=float)
    if a.ndim == 1 and m == 1:
        a = a[:, None]
    if a.ndim == 2:
        a = a[None]
    if a.ndim != 3 or a.shape[2] != m:
        raise ShapeError(f"phi array shape {np.shape(phi)} incompatible with m={m}")
    if a.shape[1] < T:
        raise ShapeError(f"phi array has {a.shape[1]} grid points, need {T}")
    return a[:, :T]


def _path_constant(a: np.ndarray | None) -> bool:
    if a is None or a.shape[0] <= 1:
        return True
    return bool(np.all(a == a[:1]))


class Projector:
    """Least-squares projection onto polynomials (total degree <= degree) of standardised features.

    Near-constant feature columns are dropped, so with no informative feature
    the projection is the sample mean. Standardised features are clipped to
    [-clip, clip]: rare paths (two early jumps, say) would otherwise carry
    leverage near one and the z and r estimates, which divide by dt, would
    interpolate them. Rank-deficient bases are handled by a truncated SVD.
    """

    def __init__(self, features: np.ndarray | None, degree: int = 2, M: int | None = None, clip: float = 3.0):
        if features is None or features.size == 0:
            cols = []
            M = M if M is not None else (features.shape[0] if features is not None else 1)
        else:
            M = features.shape[0]
            mean = features.mean(axis=0)
            std = features.std(axis=0)
            keep = std > 1e-12 * np.maximum(1.0, np.abs(mean))
            Z = np.clip((features[:, keep] - mean[keep]) / std[keep], -clip, clip)
            cols = [Z[:, i] for i in range(Z.shape[1])]
        basis = [np.ones(M)]
        if degree >= 1:
            basis += cols
        if degree >= 2:
            for i in range(len(cols)):
                for j in range(i, len(cols)):
                    basis.append(cols[i] * cols[j])
        B = np.stack(basis, axis=1)
        self.n_basis = B.shape[1]
        if B.shape[1] == 1:
            self.Q = None
        else:
            U, s, _ = np.linalg.svd(B, full_matrices=False)
            self.Q = U[:, s > 1e-10 * s[0]]

    def __call__(self, target: np.ndarray) -> np.ndarray:
        flat = target.reshape(target.shape[0], -1)
        if self.Q is None:
            out = np.broadcast_to(flat.mean(axis=0), flat.shape).copy()
        else:
            out = self.Q @ (self.Q.T @ flat)
        return out.reshape(target.shape)


@dataclass
class BsdeSolution:
    """Arrays (y, z, r) on a grid; ``ybar`` holds E_k[y_{k+1}] and ``driver_values`` G + phi."""

    y: np.ndarray
    z: np.ndarray
    r: np.ndarray
    ybar: np.ndarray
    driver_values: np.ndarray
    rates: np.ndarray
    grid: TimeGrid
    noise_id: tuple
    y0_se: float = 0.0
    mode: str = "regression"
    truncation_history: list = field(default_factory=list)

    @property
    def y0(self) -> np.ndarray:
        return self.y[:, 0].mean(axis=0)

    def theta(self, x: np.ndarray | None = None) -> ThetaPath:
        return ThetaPath(x, self.y, self.z, self.r, self.rates)

    def extended(self, n_points: int) -> "BsdeSolution":
        extra = n_points - self.y.shape[1]

        def pad(a):
            w = [(0, 0)] * a.ndim
            w[1] = (0, extra)
            return np.pad(a, w)

        return BsdeSolution(pad(self.y), pad(self.z), pad(self.r), pad(self.ybar), pad(self.driver_values),
                            self.rates, self.grid.extended(n_points - 1), self.noise_id, self.y0_se,
                            self.mode, list(self.truncation_history))


def _regression_features(noise: NoiseBundle, state: np.ndarray | None) -> np.ndarray:
    parts = []
    if state is not None:
        parts.append(state.reshape(state.shape[0], state.shape[1], -1))
    if noise.d:
        parts.append(noise.cumulative_brownian())
    if noise.rates.size and np.any(noise.rates > 0):
        c = noise.cumulative_compensated()
        parts.append(c.reshape(c.shape[0], c.shape[1], -1))
    if not parts:
        return np.zeros((noise.M, noise.grid.n_steps + 1, 0))
    return np.concatenate(parts, axis=2)


def solve_finite(driver: BsdeDriver, grid: TimeGrid, noise: NoiseBundle, terminal: np.ndarray | None = None,
                 state: np.ndarray | None = None, features: np.ndarray | None = None, degree: int = 2,
                 mode: str = "auto") -> BsdeSolution:
    """Backward induction on ``grid`` with terminal value ``terminal`` (default 0).

    ``state`` (M, N+1, n) is passed to state-dependent drivers and, unless
    ``features`` is given, used as a regression variable. ``mode`` is
    "auto", "regression" or "deterministic".
    """
    if noise.grid.n_steps != grid.n_steps or not np.isclose(noise.grid.dt, grid.dt, rtol=1e-12):
        raise ShapeError("noise bundle was generated on a different grid")
    N, dt, m = grid.n_steps, grid.dt, driver.m
    C0 = driver.params.C0
    if dt * C0 >= 1:
        raise StepSizeError(f"dt*C0 = {dt * C0:.3g} >= 1; the implicit step does not contract",
                            suggested_dt=0.5 / C0)
    M = noise.M
    rates = noise.rates
    l, mm = rates.shape
    d = noise.d

    phis = phi_values(driver.phi, grid, m)
    if phis.shape[0] not in (1, M):
        raise ShapeError(f"adapted phi has {phis.shape[0]} paths, noise has {M}")
    term = np.zeros((1, m)) if terminal is None else np.asarray(terminal, dtype=float).reshape(-1, m)
    if state is not None:
        state = np.asarray(state, dtype=float)
        if state.ndim == 2:
            state = state[:, :, None]
        if state.shape[:2] != (M, N + 1):
            raise ShapeError(f"state shape {state.shape} does not match (M, N+1) = {(M, N + 1)}")
    if features is not None:
        features = np.asarray(features, dtype=float)
        if features.ndim == 2:
            features = features[:, :, None]

    deterministic = (_path_constant(phis) and _path_constant(term)
                     and (not driver.state_dependent or _path_constant(state)))
    if mode == "deterministic" and not deterministic:
        raise ValidationError("deterministic mode requested but inputs vary across paths")
    if mode == "auto":
        mode = "deterministic" if deterministic else "regression"

    P = 1 if mode == "deterministic" else M
    y = np.zeros((P, N + 1, m))
    z = np.zeros((P, N + 1, m, d))
    r = np.zeros((P, N + 1, m, l, mm))
    ybar = np.zeros((P, N + 1, m))
    drv = np.zeros((P, N + 1, m))
    y[:, N] = np.broadcast_to(term, (P, m)) if term.shape[0] == 1 else term[:P]
    ybar[:, N] = y[:, N]
    st = None if state is None else (state[:1] if P == 1 else state)
    ph = phis[:1] if P == 1 else np.broadcast_to(phis, (M,) + phis.shape[1:])

    feats = None
    comp = None
    if mode == "regression":
        feats = _regression_features(noise, features if features is not None else state)
        comp = noise.compensated()
        pos = rates > 0
    times = grid.times
    max_iters = 0
    se0 = 0.0
    for k in range(N - 1, -1, -1):
        t = times[k]
        yn = y[:, k + 1]
        if mode == "regression":
            proj = Projector(feats[:, k], degree)
            yb = proj(yn)
            dy = yn - yb
            if d:
                z[:, k] = proj(dy[:, :, None] * noise.dW[:, k, None, :]) / dt
            if l * mm and np.any(pos):
                raw = proj(dy[:, :, None, None] * comp[:, k, None, :, :])
                r[:, k] = np.where(pos, raw / np.where(pos, rates * dt, 1.0), 0.0)
            if k == 0:
                se0 = float(np.max(np.std(yn, axis=0)) / np.sqrt(M))
        else:
            yb = yn.copy()
        ybar[:, k] = yb
        zk, rk = z[:, k], r[:, k]
        args = (st[:, k],) if driver.state_dependent else ()
        yk = yb.copy()
        for it in range(FIXED_POINT_ITERS):
            g = np.asarray(driver.G(t, yk, zk, rk, *args), dtype=float) + ph[:, k]
            new = yb + dt * g
            diff = np.max(np.abs(new - yk)) if new.size else 0.0
            yk = new
            if diff <= FIXED_POINT_TOL * max(1.0, float(np.max(np.abs(new))) if new.size else 1.0):
                break
        else:
            raise StepSizeError(f"implicit step at t={t:.4g} did not converge in {FIXED_POINT_ITERS} iterations",
                                suggested_dt=0.5 * dt)
        max_iters = max(max_iters, it + 1)
        y[:, k] = yk
        drv[:, k] = np.asarray(driver.G(t, yk, zk, rk, *args), dtype=float) + ph[:, k]

    if P == 1 and M > 1:
        def full(a):
            return np.broadcast_to(a, (M,) + a.shape[1:]).copy()
        y, z, r, ybar, drv = full(y), full(z), full(r), full(ybar), full(drv)
    return BsdeSolution(y, z, r, ybar, drv, np.asarray(rates), grid, noise.identity, se0, mode)


def default_schedule(params: BsdeParams, dt: float, n_horizons: int = 6) -> list[float]:
    """Horizons j T0, j = 1..n_horizons, with T0 = 5/gap rounded to a multiple of dt."""
    gap = params.gap
    if not gap > 0:
        raise AssumptionError(f"backward gap {gap} is not positive")
    T0 = max(1, int(round(5.0 / gap / dt))) * dt
    return [j * T0 for j in range(1, n_horizons + 1)]


def _trivial_factory(grid: TimeGrid) -> NoiseBundle:
    return generate(NoiseSpec(0, MarkSpace.empty(), 1, grid, 0))


def solve_infinite(driver: BsdeDriver, horizon_schedule: Sequence[float] | None = None, tol: float = 1e-3,
                   dt: float = 0.01, noise_factory: Callable | None = None, n_horizons: int = 6,
                   **solver_kw) -> BsdeSolution:
    """Truncation construction: solve on growing horizons with zero terminal value.

    ``noise_factory(grid)`` must return bundles whose paths are prefixes of
    one another (see ``noise.prefix_factory``). The distance between
    consecutive horizons is the L^{2,K} norm of the difference after extending
    the shorter solution by zero; the first distance is measured against 0.
    """
    params = driver.params
    if not params.K > 0:
        raise ValidationError("solve_infinite requires K > 0")
    params.validate()
    schedule = list(horizon_schedule) if horizon_schedule is not None else default_schedule(params, dt, n_horizons)
    if any(b <= a for a, b in zip(schedule, schedule[1:])):
        raise ValidationError("horizon schedule must be increasing")
    factory = noise_factory or _trivial_factory
    history = []
    prev = None
    for h in schedule:
        grid = TimeGrid.from_dt(h, dt)
        noise = factory(grid)
        sol = solve_finite(driver, grid, noise, **solver_kw)
        diff = sol if prev is None else _difference(sol, prev.extended(grid.n_steps + 1))
        w = np.exp(params.K * grid.times[:-1]) * grid.dt
        sq = (np.sum(diff.y ** 2, axis=2) + np.sum(diff.z ** 2, axis=(2, 3))
              + jump_sq(diff.r, diff.rates, 2))
        sq = np.broadcast_to(sq, diff.y.shape[:2])
        dist = float(np.sqrt(np.mean(sq[:, :-1] @ w)))
        history.append((grid.t_max, dist))
        prev = sol
        if dist < tol:
            sol.truncation_history = history
            return sol
    raise ConvergenceError(f"horizon schedule exhausted; last distance {history[-1][1]:.3g} >= tol {tol}",
                           trace=history)


def _difference(a: BsdeSolution, b: BsdeSolution) -> BsdeSolution:
    return BsdeSolution(a.y - b.y, a.z - b.z, a.r - b.r, a.ybar - b.ybar, a.driver_values - b.driver_values,
                        a.rates, a.grid, a.noise_id)


def deterministic_oracle(mu: float, drivers, grid: TimeGrid, n_nodes: int = 10):
    """Deterministic (p, q, k) for the base linear system with rate mu.

    ``drivers`` is ``(phi, psi, xi, eta)``; each entry is a callable of t or
    None. p(t) = int_t^T e^{-mu(s-t)} (phi + eta)(s) ds by Gauss-Legendre
    quadrature on each grid interval (tail beyond t_max cut off),
    q = psi/(1+mu), k = xi/(1+mu).
    """
    if not mu > 0:
        raise ValidationError(f"mu must be positive, got {mu}")
    phi, psi, xi, eta = drivers
    times = grid.times
    N, dt = grid.n_steps, grid.dt

    def ev(f, t):
        return np.atleast_1d(np.asarray(f(t), dtype=float))

    src = [f for f in (phi, eta) if f is not None]
    n = len(ev(src[0], 0.0)) if src else (ev(psi, 0.0).shape[0] if psi is not None else
                                          ev(xi, 0.0).shape[0] if xi is not None else 1)
    nodes, weights = np.polynomial.legendre.leggauss(n_nodes)
    s_rel = 0.5 * dt * (nodes + 1.0)
    w = 0.5 * dt * weights * np.exp(-mu * s_rel)
    p = np.zeros((N + 1, n))
    if src:
        f_at = np.array([[sum(ev(f, tk + s) for f in src) for s in s_rel] for tk in times[:-1]])
        integrals = np.einsum("j,kjn->kn", w, f_at)
        decay = np.exp(-mu * dt)
        for k in range(N - 1, -1, -1):
            p[k] = integrals[k] + decay * p[k + 1]
    q = np.array([np.asarray(psi(t), dtype=float).reshape(n, -1) for t in times]) / (1 + mu) \
        if psi is not None else np.zeros((N + 1, n, 0))
    if xi is not None:
        x0 = np.asarray(xi(0.0), dtype=float)
        shape = x0.reshape(n, *x0.shape[-2:]).shape if x0.ndim >= 2 else (n, 1, 1)
        kk = np.array([np.asarray(xi(t), dtype=float).reshape(shape) for t in times]) / (1 + mu)
    else:
        kk = np.zeros((N + 1, n, 0, 0))
    return p, q, kk


def _phi_diff_sq_paths(phi1, phi2, grid: TimeGrid, m: int, M: int) -> np.ndarray:
    a = phi_values(phi1, grid, m)
    b = phi_values(phi2, grid, m)
    diff = a - b
    sq = np.sum(diff ** 2, axis=2)
    return np.broadcast_to(sq, (M, grid.n_steps + 1))


def apriori_check(sol1: BsdeSolution, sol2: BsdeSolution, phi1, phi2, params: BsdeParams, K: float
                  ) -> VerificationReport:
    """Both sides of the a priori estimate for two solutions on common noise.

    lhs = E sum [gap |y^|^2 + |z^|^2/2 + |r^|^2/2] e^{Kt} dt,
    rhs = (1/delta) E sum |phi^|^2 e^{Kt} dt, SE from the per-path difference.
    """
    if sol1.noise_id != sol2.noise_id:
        raise ComparabilityError("solutions were computed on different noise")
    if not params.delta > 0:
        raise ValidationError("a priori check needs delta > 0")
    grid = sol1.grid
    M, m = sol1.y.shape[0], sol1.y.shape[2]
    gap = K + 2 * params.rho - 2 * params.C1 ** 2 - 2 * params.C2 ** 2 - params.delta
    dy, dz, dr = sol1.y - sol2.y, sol1.z - sol2.z, sol1.r - sol2.r
    point = (gap * np.sum(dy ** 2, axis=2) + 0.5 * np.sum(dz ** 2, axis=(2, 3))
             + 0.5 * jump_sq(dr, sol1.rates, 2))
    point = np.broadcast_to(point, (M, grid.n_steps + 1))
    w = np.exp(K * grid.times[:-1]) * grid.dt
    lhs_p = point[:, :-1] @ w
    rhs_p = _phi_diff_sq_paths(phi1, phi2, grid, m, M)[:, :-1] @ w / params.delta
    diff = lhs_p - rhs_p
    se = float(np.std(diff) / np.sqrt(M)) if M > 1 else 0.0
    lhs, rhs = float(np.mean(lhs_p)), float(np.mean(rhs_p))
    return VerificationReport.inequality("a priori estimate", lhs, rhs, se,
                                         detail={"gap": gap, "ratio": lhs / rhs if rhs > 0 else None})


def decay_diagnostic(y: np.ndarray, K: float, grid: TimeGrid) -> np.ndarray:
    """Series E[|y(t_k)|^2] e^{K t_k} over the grid."""
    y = np.asarray(y, dtype=float)
    if y.ndim == 2:
        y = y[:, :, None]
    return np.mean(np.sum(y ** 2, axis=2), axis=0) * np.exp(K * grid.times)


def decays(series: np.ndarray) -> bool:
    """True when the last-decile mean of the series is below its first-decile mean."""
    n = max(1, len(series) // 10)
    return bool(np.mean(series[-n:]) < np.mean(series[:n]))


def backward_residual(sol: BsdeSolution, noise: NoiseBundle) -> np.ndarray:
    """y_k - [y_{k+1} + (G+phi)_k dt - z_k dW_k - r_k dN~_k], shape (M, N, m)."""
    dt = sol.grid.dt
    out = sol.y[:, :-1] - sol.y[:, 1:] - dt * sol.driver_values[:, :-1]
    if noise.d:
        out = out + np.einsum("pkmd,pkd->pkm", sol.z[:, :-1], noise.dW)
    if sol.r.size:
        out = out + np.einsum("pkmij,pkij->pkm", sol.r[:, :-1], noise.compensated())
    return out
