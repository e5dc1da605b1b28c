"""Fully coupled infinite-horizon FBSDEs

    dx = b dt + sigma dW + gamma dN~,   -dy = g dt - z dW - r dN~,   x(0) = Phi(y(0)).

Three routes are provided. ``solve_alpha0`` handles the decoupled base
system reached at alpha = 0. ``solve_continuation`` climbs from alpha = 0
to 1 with fixed steps delta0 and contraction maps between levels.
``solve_picard`` is a damped forward/backward sweep and is the practical
default. All solutions live on one grid and one noise bundle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .algebraic import InitialCoupling, solve_initial_coupling
from .bsde import BsdeDriver, BsdeSolution, solve_finite
from .errors import (
    AssumptionError,
    ComparabilityError,
    ContinuationError,
    DivergenceError,
    NonConvergenceError,
    ShapeError,
    ValidationError,
)
from .model import (
    BsdeParams,
    CoefficientSet,
    ThetaPath,
    TimeGrid,
    VerificationReport,
    jump_sq,
    weighted_norm_sq,
    weighted_norm_sq_paths,
)
from .noise import NoiseBundle

__all__ = [
    "Inhomogeneity",
    "ContinuationState",
    "PicardConfig",
    "evaluate_coefficients",
    "solve_forward",
    "solve_alpha0",
    "step_length",
    "apply_continuation_map",
    "solve_continuation",
    "contraction_check",
    "solve_picard",
    "picard_sweep",
    "splitting_sweep",
    "stability_estimate",
    "stability_scaling",
    "comparison_check",
    "forward_residual",
    "random_theta",
]


# ---------------------------------------------------------------------------
# inhomogeneities


def _tail_values(f, grid: TimeGrid, tail: tuple) -> np.ndarray:
    """Evaluate a callable of t, or reshape an array, to (P, N+1, *tail)."""
    T = grid.n_steps + 1
    if f is None:
        return np.zeros((1, T) + tail)
    if callable(f):
        return np.array([np.broadcast_to(np.asarray(f(t), dtype=float), tail) for t in grid.times])[None]
    a = np.asarray(f, dtype=float)
    if a.shape == (T,) + tail:
        return a[None]
    if a.ndim == len(tail) + 2 and a.shape[1:] == (T,) + tail:
        return a
    if a.ndim == len(tail) + 2 and a.shape[2:] == tail and a.shape[1] > T:
        return a[:, :T]
    raise ShapeError(f"inhomogeneity shape {a.shape} incompatible with {(T,) + tail}")


@dataclass
class Inhomogeneity:
    """Extra terms (eta, phi, psi, xi) added to (g, b, sigma, gamma).

    Each entry is None, a callable of t, a deterministic array (N+1, ...) or
    an adapted array (M, N+1, ...).
    """

    eta: object = None
    phi: object = None
    psi: object = None
    xi: object = None

    def arrays(self, grid: TimeGrid, n: int, d: int, rates: np.ndarray, n_y: int | None = None):
        n_y = n if n_y is None else n_y
        l, m = rates.shape
        return (_tail_values(self.eta, grid, (n_y,)), _tail_values(self.phi, grid, (n,)),
                _tail_values(self.psi, grid, (n, d)), _tail_values(self.xi, grid, (n, l, m)))

    def is_zero(self) -> bool:
        return all(v is None for v in (self.eta, self.phi, self.psi, self.xi))


@dataclass
class ContinuationState:
    alpha: float
    inhomog: Inhomogeneity
    theta: ThetaPath | None
    epsilon: float
    delta0: float
    level_trace: list = field(default_factory=list)


@dataclass
class PicardConfig:
    damping: float = 0.5
    max_iter: int = 200
    tol: float = 1e-6
    min_damping: float = 1.0 / 64
    sweep: str = "alternating"
    splitting_rate: float | None = None
    patience: int = 6

    def __post_init__(self):
        if self.sweep not in ("alternating", "splitting"):
            raise ValidationError(f"unknown sweep {self.sweep!r}")
        if not 0 < self.damping <= 1:
            raise ValidationError("damping must lie in (0, 1]")
        if not self.tol > 0:
            raise ValidationError("tol must be positive")
        if self.max_iter < 1:
            raise ValidationError("max_iter must be positive")


# ---------------------------------------------------------------------------
# building blocks


def evaluate_coefficients(coeffs: CoefficientSet, theta: ThetaPath, grid: TimeGrid):
    """(g, b, sigma, gamma) of ``coeffs`` along ``theta`` at every grid point."""
    M, T = theta.M, theta.n_points
    g = np.zeros((M, T, coeffs.n_y))
    b = np.zeros((M, T, coeffs.n))
    s = np.zeros((M, T, coeffs.n, coeffs.d))
    ga = np.zeros((M, T, coeffs.n, coeffs.marks.l, coeffs.marks.m))
    for k, t in enumerate(grid.times):
        args = (t, theta.x[:, k], theta.y[:, k], theta.z[:, k], theta.r[:, k])
        g[:, k] = coeffs.eval_g(*args)
        b[:, k] = coeffs.eval_b(*args)
        s[:, k] = coeffs.eval_sigma(*args)
        ga[:, k] = coeffs.eval_gamma(*args)
    return g, b, s, ga


def _unpack_yzr(yzr):
    if isinstance(yzr, ThetaPath):
        return yzr.y, yzr.z, yzr.r
    if isinstance(yzr, BsdeSolution):
        return yzr.y, yzr.z, yzr.r
    return tuple(np.asarray(a, dtype=float) for a in yzr)


def solve_forward(coeffs: CoefficientSet, yzr, x0, grid: TimeGrid, noise: NoiseBundle) -> np.ndarray:
    """Euler-Maruyama for x with (y, z, r) frozen; left-point coefficients throughout."""
    y, z, r = _unpack_yzr(yzr)
    M, N, dt = noise.M, grid.n_steps, grid.dt
    if y.shape[1] != N + 1:
        raise ShapeError("(y, z, r) arrays do not match the grid")
    x = np.zeros((M, N + 1, coeffs.n))
    x[:, 0] = np.broadcast_to(np.asarray(x0, dtype=float), (M, coeffs.n))
    comp = noise.compensated() if coeffs.marks.l * coeffs.marks.m else None

    def at(a, k):
        return np.broadcast_to(a[:, k], (M,) + a.shape[2:])

    for k, t in enumerate(grid.times[:-1]):
        args = (t, x[:, k], at(y, k), at(z, k), at(r, k))
        step = coeffs.eval_b(*args) * dt
        if coeffs.d and coeffs.sigma is not None:
            step = step + np.einsum("pnd,pd->pn", coeffs.eval_sigma(*args), noise.dW[:, k])
        if comp is not None and coeffs.gamma is not None:
            step = step + np.einsum("pnij,pij->pn", coeffs.eval_gamma(*args), comp[:, k])
        x[:, k + 1] = x[:, k] + step
        if not np.all(np.isfinite(x[:, k + 1])):
            raise DivergenceError(f"forward state became non-finite at step {k + 1}", step=k + 1)
    return x


def forward_residual(coeffs: CoefficientSet, theta: ThetaPath, grid: TimeGrid, noise: NoiseBundle) -> np.ndarray:
    """x_{k+1} - x_k minus the Euler increment; zero up to rounding for solver output."""
    g, b, s, ga = evaluate_coefficients(coeffs, theta, grid)
    inc = b[:, :-1] * grid.dt
    if coeffs.d:
        inc = inc + np.einsum("pknd,pkd->pkn", s[:, :-1], noise.dW)
    if coeffs.marks.l * coeffs.marks.m:
        inc = inc + np.einsum("pknij,pkij->pkn", ga[:, :-1], noise.compensated())
    return theta.x[:, 1:] - theta.x[:, :-1] - inc


def solve_alpha0(mu: float, phi_map: Callable, inhomog: Inhomogeneity, grid: TimeGrid, noise: NoiseBundle,
                 n: int = 1, lipschitz_C: float = 1.0, tol: float = 1e-12, features: np.ndarray | None = None,
                 mode: str = "auto") -> ThetaPath:
    """Base system at alpha = 0.

    Solves the linear backward equation for (p, q, k) with driver -mu p and
    inhomogeneity phi + eta, the scalar or vector coupling x(0) = Phi(x(0) + p(0)),
    then the forward equation for x; returns (x, x + p, q, k).
    """
    if not mu > 0:
        raise ValidationError("mu must be positive")
    d, rates = noise.d, noise.rates
    eta, phi, psi, xi = inhomog.arrays(grid, n, d, rates)
    M, N, dt = noise.M, grid.n_steps, grid.dt
    driver = BsdeDriver(lambda t, p, q, k: -mu * p, phi + eta, BsdeParams(rho=mu, C0=mu), m=n)
    sol = solve_finite(driver, grid, noise, features=features, mode=mode)
    p = sol.y
    q = (sol.z + psi) / (1.0 + mu)
    kk = (sol.r + xi) / (1.0 + mu)
    p0 = p[:, 0].mean(axis=0)
    x0 = solve_initial_coupling(InitialCoupling(phi_map, lipschitz_C, p0, tol))

    drift_src = np.broadcast_to(phi, (M,) + phi.shape[1:])
    sig = np.broadcast_to(-mu * q + psi, (M, N + 1, n, d))
    jmp = np.broadcast_to(-mu * kk + xi, (M, N + 1) + kk.shape[2:])
    x = np.zeros((M, N + 1, n))
    x[:, 0] = x0
    comp = noise.compensated() if rates.size else None
    for k in range(N):
        step = (-mu * (x[:, k] + p[:, k]) + drift_src[:, k]) * dt
        if d:
            step = step + np.einsum("pnd,pd->pn", sig[:, k], noise.dW[:, k])
        if comp is not None:
            step = step + np.einsum("pnij,pij->pn", jmp[:, k], comp[:, k])
        x[:, k + 1] = x[:, k] + step
    q = np.broadcast_to(q, (M,) + q.shape[1:]).copy()
    kk = np.broadcast_to(kk, (M,) + kk.shape[1:]).copy()
    return ThetaPath(x, x + p, q, kk, rates)


def step_length(mu: float, C: float, K: float, epsilon: float | None = None):
    """delta0 = sqrt(eps (2mu - K - 2eps) / (2 (C + mu)^2)); default eps = (2mu - K)/4."""
    gap = 2 * mu - K
    if not gap > 0:
        raise AssumptionError(f"2mu - K = {gap} is not positive")
    eps = gap / 4.0 if epsilon is None else float(epsilon)
    if not 0 < eps < gap / 2:
        raise ValidationError(f"epsilon must lie in (0, {gap / 2})")
    return math.sqrt(eps * (gap - 2 * eps) / (2 * (C + mu) ** 2)), eps


def _shifted(coeffs: CoefficientSet, delta: float, theta: ThetaPath, inhomog: Inhomogeneity,
             grid: TimeGrid, noise: NoiseBundle) -> Inhomogeneity:
    mu = coeffs.monotone_mu
    eta, phi, psi, xi = inhomog.arrays(grid, coeffs.n, noise.d, noise.rates)
    if delta == 0:
        return Inhomogeneity(eta, phi, psi, xi)
    g, b, s, ga = evaluate_coefficients(coeffs, theta, grid)
    return Inhomogeneity(eta + delta * (g - mu * theta.x), phi + delta * (b + mu * theta.y),
                         psi + delta * (s + mu * theta.z), xi + delta * (ga + mu * theta.r))


def apply_continuation_map(solver_at_alpha0: Callable, delta: float, theta_in: ThetaPath, coeffs: CoefficientSet,
                           inhomog: Inhomogeneity, grid: TimeGrid, noise: NoiseBundle) -> ThetaPath:
    """Theta = I_{alpha0 + delta}(theta_in).

    ``solver_at_alpha0(inhomog, hint)`` must solve the level-alpha0 system for
    the given inhomogeneity; ``hint`` is ``theta_in`` (used for regression
    variables and warm starts).
    """
    return solver_at_alpha0(_shifted(coeffs, delta, theta_in, inhomog, grid, noise), theta_in)


def _base_solver(coeffs: CoefficientSet, grid: TimeGrid, noise: NoiseBundle, mode: str, mu: float | None = None):
    # The regression basis is built from the noise alone so that the map is
    # the same linear projection at every iterate.
    rate = coeffs.monotone_mu if mu is None else mu

    def solve(inh: Inhomogeneity, hint: ThetaPath | None = None) -> ThetaPath:
        return solve_alpha0(rate, coeffs.phi, inh, grid, noise, n=coeffs.n,
                            lipschitz_C=coeffs.lipschitz_C, mode=mode)
    return solve


def _zero_theta(coeffs: CoefficientSet, grid: TimeGrid, noise: NoiseBundle) -> ThetaPath:
    return ThetaPath.zeros(noise.M, grid.n_steps + 1, coeffs.n, noise.d, noise.rates, coeffs.n_y)


def solve_continuation(coeffs: CoefficientSet, grid: TimeGrid, noise: NoiseBundle, max_levels: int = 3,
                       inner_tol: float = 1e-6, max_inner: int = 60, epsilon: float | None = None,
                       delta: float | None = None, inhomog: Inhomogeneity | None = None, mode: str = "auto"):
    """Method of continuation from alpha = 0 to alpha = 1.

    Levels are alpha_j = min(j delta, 1). The level-j solver iterates the
    contraction I_{alpha_j} built on the level-(j-1) solver, recursively down
    to the base system. Lower levels are warm-started from their previous
    solution, which leaves the fixed points unchanged. Returns
    ``(theta, state)``; raises ``ContinuationError`` with the partial result
    when more than ``max_levels`` levels or ``max_inner`` iterations are needed.
    """
    if coeffs.n != coeffs.n_y:
        raise ValidationError("continuation needs equal forward and backward dimensions")
    mu, C, K = coeffs.monotone_mu, coeffs.lipschitz_C, coeffs.weight_K
    delta0, eps = step_length(mu, C, K, epsilon)
    step = delta0 if delta is None else float(delta)
    if not 0 < step <= delta0 * (1 + 1e-12):
        raise ValidationError(f"step {step} must lie in (0, delta0 = {delta0}]")
    inhomog = inhomog or Inhomogeneity()
    n_levels = max(1, math.ceil(1.0 / step - 1e-12))
    alphas = [0.0] + [min(j * step, 1.0) for j in range(1, n_levels + 1)]
    state = ContinuationState(0.0, inhomog, None, eps, delta0)
    base = _base_solver(coeffs, grid, noise, mode)
    cache: dict[int, ThetaPath] = {}

    def solve_level(j: int, inh: Inhomogeneity, guess: ThetaPath | None, tol: float, record: bool):
        if j == 0:
            return base(inh, guess)
        dj = alphas[j] - alphas[j - 1]

        def lower(inh2, hint):
            out = solve_level(j - 1, inh2, cache.get(j - 1, hint), tol * 0.1, False)
            cache[j - 1] = out
            return out

        theta = guess if guess is not None else _zero_theta(coeffs, grid, noise)
        prev_dist = None
        ratio = float("nan")
        for it in range(1, max_inner + 1):
            new = apply_continuation_map(lower, dj, theta, coeffs, inh, grid, noise)
            dist = math.sqrt(weighted_norm_sq(new - theta, K, grid))
            if prev_dist is not None and prev_dist > 0:
                ratio = dist / prev_dist
            prev_dist = dist
            theta = new
            if dist < tol:
                break
        else:
            if record:
                state.level_trace.append((alphas[j], max_inner, ratio))
            raise ContinuationError(f"level alpha={alphas[j]:.4g} did not reach tol in {max_inner} iterations",
                                    last_alpha=alphas[j - 1], theta=theta, state=state)
        if record:
            state.level_trace.append((alphas[j], it, ratio))
        return theta

    theta = _zero_theta(coeffs, grid, noise)
    for j in range(1, min(n_levels, max_levels) + 1):
        theta = solve_level(j, inhomog, theta, inner_tol, True)
        state.alpha, state.theta = alphas[j], theta
    if n_levels > max_levels:
        raise ContinuationError(f"{n_levels} levels needed (delta0={delta0:.4g}) but max_levels={max_levels}",
                                last_alpha=state.alpha, theta=theta, state=state)
    return theta, state


def random_theta(noise: NoiseBundle, grid: TimeGrid, n: int, rng: np.random.Generator, decay: float = 1.0,
                 n_y: int | None = None) -> ThetaPath:
    """Random adapted quadruple built from the driving noise, damped by e^{-decay t}."""
    n_y = n if n_y is None else n_y
    M = noise.M
    t = grid.times
    damp = np.exp(-decay * t)[None, :, None]
    W = noise.cumulative_brownian()
    Nc = noise.cumulative_compensated().reshape(M, grid.n_steps + 1, -1)
    feats = np.concatenate([np.ones((M, grid.n_steps + 1, 1)), W, Nc, np.sin(t)[None, :, None] * np.ones((M, 1, 1))],
                           axis=2)
    F = feats.shape[2]

    def draw(tail):
        size = int(np.prod(tail))
        coef = rng.standard_normal((F, size))
        return (feats @ coef * damp).reshape((M, grid.n_steps + 1) + tail)

    l, m = noise.rates.shape
    return ThetaPath(draw((n,)), draw((n_y,)), draw((n_y, noise.d)), draw((n_y, l, m)), noise.rates)


def contraction_check(coeffs: CoefficientSet, grid: TimeGrid, noise: NoiseBundle, n_pairs: int = 50,
                      delta: float | None = None, epsilon: float | None = None, seed: int = 0,
                      mode: str = "auto") -> VerificationReport:
    """Measured ratio |I(theta1) - I(theta2)| / |theta1 - theta2| at alpha0 = 0.

    Reports the largest ratio over ``n_pairs`` random adapted pairs; its
    standard error comes from the delta method over paths.
    """
    mu, C, K = coeffs.monotone_mu, coeffs.lipschitz_C, coeffs.weight_K
    delta0, eps = step_length(mu, C, K, epsilon)
    delta = delta0 if delta is None else delta
    base = _base_solver(coeffs, grid, noise, mode)
    zero = Inhomogeneity()
    rng = np.random.default_rng(seed)
    ratios, ses = [], []
    for _ in range(n_pairs):
        t1 = random_theta(noise, grid, coeffs.n, rng)
        t2 = random_theta(noise, grid, coeffs.n, rng)
        o1 = apply_continuation_map(base, delta, t1, coeffs, zero, grid, noise)
        o2 = apply_continuation_map(base, delta, t2, coeffs, zero, grid, noise)
        a = weighted_norm_sq_paths(o1 - o2, K, grid)
        b = weighted_norm_sq_paths(t1 - t2, K, grid)
        A, B = a.mean(), b.mean()
        ratio = math.sqrt(A / B)
        # delta method for sqrt(mean a / mean b)
        if noise.M > 1:
            cov = np.cov(np.vstack([a, b])) / noise.M
            grad = np.array([0.5 / math.sqrt(A * B), -0.5 * math.sqrt(A) / B ** 1.5])
            se = float(math.sqrt(max(grad @ cov @ grad, 0.0)))
        else:
            se = 0.0
        ratios.append(ratio)
        ses.append(se)
    worst = int(np.argmax(ratios))
    return VerificationReport.inequality(
        "continuation contraction", ratios[worst], 0.5, ses[worst],
        detail={"delta": delta, "delta0": delta0, "epsilon": eps, "n_pairs": n_pairs,
                "mean_ratio": float(np.mean(ratios)), "ratios": [float(r) for r in ratios]})


# ---------------------------------------------------------------------------
# Picard


def _backward_driver(coeffs: CoefficientSet) -> BsdeDriver:
    def G(t, y, z, r, x):
        return coeffs.eval_g(t, x, y, z, r)
    return BsdeDriver(G, None, BsdeParams(rho=0.0, C0=coeffs.lipschitz_C), m=coeffs.n_y, state_dependent=True)


def picard_sweep(coeffs: CoefficientSet, theta: ThetaPath, grid: TimeGrid, noise: NoiseBundle,
                 mode: str = "auto") -> ThetaPath:
    """One undamped sweep: x(0) = Phi(y(0)), forward x, then backward (y, z, r) given x."""
    y0 = theta.y[:, 0].mean(axis=0)
    x0 = np.atleast_1d(np.asarray(coeffs.phi(y0), dtype=float))
    x = solve_forward(coeffs, theta, x0, grid, noise)
    feats = coeffs.features(x) if coeffs.features is not None else None
    sol = solve_finite(_backward_driver(coeffs), grid, noise, state=x, features=feats, mode=mode)
    return ThetaPath(x, sol.y, sol.z, sol.r, noise.rates)


def splitting_sweep(coeffs: CoefficientSet, theta: ThetaPath, grid: TimeGrid, noise: NoiseBundle,
                    rate: float | None = None, mode: str = "auto") -> ThetaPath:
    """Continuation map from the base system with rate s straight to alpha = 1.

    theta -> solution of the base system with inhomogeneity A(theta) + s theta.
    For s large enough this is a forward-backward splitting step and contracts.
    """
    s = 2.0 * coeffs.monotone_mu if rate is None else rate
    base = _base_solver(coeffs, grid, noise, mode, mu=s)
    return apply_continuation_map(base, 1.0, theta, coeffs.replace(monotone_mu=s), Inhomogeneity(), grid, noise)


def solve_picard(coeffs: CoefficientSet, grid: TimeGrid, noise: NoiseBundle, config: PicardConfig | None = None,
                 initial: ThetaPath | None = None, mode: str = "auto", sweep: str | None = None,
                 splitting_rate: float | None = None):
    """Damped Picard iteration. Returns ``(theta, trace)``.

    ``sweep="alternating"`` runs forward then backward; ``sweep="splitting"``
    uses ``splitting_sweep`` (needs equal forward and backward dimensions).
    Both default to the values carried by ``config``.

    The stopping rule uses the estimated distance to the fixed point,
    dist / (1 - rho), where rho is the geometric-mean distance ratio over the
    last five sweeps (robust to the oscillation of complex eigenvalues). The
    damping halves when the distance has not improved on its best value for
    ``patience`` sweeps or exceeds it fourfold; the iteration gives up below
    ``min_damping`` or after ``max_iter`` sweeps.
    """
    config = config or PicardConfig()
    sweep = sweep or config.sweep
    splitting_rate = config.splitting_rate if splitting_rate is None else splitting_rate
    K = coeffs.weight_K
    theta = initial if initial is not None else _zero_theta(coeffs, grid, noise)
    damping = config.damping
    trace = []
    dists = []
    best, stale = math.inf, 0
    if sweep == "alternating":
        def step(th):
            return picard_sweep(coeffs, th, grid, noise, mode)
    elif sweep == "splitting":
        if coeffs.n != coeffs.n_y:
            raise ValidationError("the splitting sweep needs equal forward and backward dimensions")

        def step(th):
            return splitting_sweep(coeffs, th, grid, noise, splitting_rate, mode)
    else:
        raise ValidationError(f"unknown sweep {sweep!r}")
    for it in range(1, config.max_iter + 1):
        new = step(theta)
        dist = math.sqrt(weighted_norm_sq(new - theta, K, grid))
        ratio = dist / dists[-1] if dists and dists[-1] > 0 else float("nan")
        dists.append(dist)
        trace.append({"iteration": it, "distance": dist, "ratio": ratio, "damping": damping})
        if dist == 0.0:
            return new, trace
        k = min(5, len(dists) - 1)
        if k >= 2:
            rho = (dist / dists[-1 - k]) ** (1.0 / k)
            if rho < 1 and dist / (1 - rho) < config.tol:
                return new, trace
        if dist < best:
            best, stale = dist, 0
        else:
            stale += 1
        if stale >= config.patience or dist > 4 * best:
            damping *= 0.5
            best, stale = dist, 0
            if damping < config.min_damping:
                raise NonConvergenceError(f"Picard iteration diverges (last ratio {ratio:.3g})", trace=trace)
        theta = theta.blend(new, damping)
    raise NonConvergenceError(f"Picard iteration did not reach tol {config.tol} in {config.max_iter} sweeps",
                              trace=trace)


# ---------------------------------------------------------------------------
# stability and comparison


def _solve(coeffs, grid, noise, config, solver):
    if solver == "picard":
        return solve_picard(coeffs, grid, noise, config)[0]
    if solver == "continuation":
        return solve_continuation(coeffs, grid, noise)[0]
    raise ValidationError(f"unknown solver {solver!r}")


def _a_diff_sq_paths(c1: CoefficientSet, c2: CoefficientSet, theta: ThetaPath, grid: TimeGrid) -> np.ndarray:
    a = evaluate_coefficients(c1, theta, grid)
    b = evaluate_coefficients(c2, theta, grid)
    d = ThetaPath(a[0] - b[0], a[1] - b[1], a[2] - b[2], a[3] - b[3], theta.rates)
    return weighted_norm_sq_paths(d, c1.weight_K, grid)


def stability_estimate(coeffs1: CoefficientSet, coeffs2: CoefficientSet, grid: TimeGrid, noise: NoiseBundle,
                       strong_nu: float | None = None, config: PicardConfig | None = None,
                       solver: str = "picard", solutions=None) -> VerificationReport:
    """Both sides of the stability estimate with the constant derived from the energy identity.

    Plain case: c^2 |theta1 - theta2|^2 <= |A1(theta2) - A2(theta2)|^2 with
    c = mu - K/2. Strong case: min(nu, c)^2 (|y^(0)|^2 + |theta^|^2) <=
    |Phi1(y2(0)) - Phi2(y2(0))|^2 + |A1(theta2) - A2(theta2)|^2.
    """
    th1, th2 = solutions if solutions is not None else (_solve(coeffs1, grid, noise, config, solver),
                                                        _solve(coeffs2, grid, noise, config, solver))
    K = coeffs1.weight_K
    c = coeffs1.monotone_mu - K / 2
    left = weighted_norm_sq_paths(th1 - th2, K, grid)
    right = _a_diff_sq_paths(coeffs1, coeffs2, th2, grid)
    detail = {"theta_distance_sq": float(left.mean()), "coefficient_gap_sq": float(right.mean())}
    if strong_nu is None:
        const = c ** 2
    else:
        const = min(strong_nu, c) ** 2
        y2_0 = th2.y[:, 0].mean(axis=0)
        dy0 = th1.y[:, 0].mean(axis=0) - y2_0
        dphi = np.atleast_1d(coeffs1.phi(y2_0)) - np.atleast_1d(coeffs2.phi(y2_0))
        left = left + float(dy0 @ dy0)
        right = right + float(dphi @ dphi)
        detail.update({"y0_gap_sq": float(dy0 @ dy0), "phi_gap_sq": float(dphi @ dphi), "nu": strong_nu})
    lhs_p, rhs_p = const * left, right
    se = float(np.std(lhs_p - rhs_p) / math.sqrt(noise.M)) if noise.M > 1 else 0.0
    detail["constant"] = const
    detail["lhs_unscaled"] = float(left.mean())
    return VerificationReport.inequality("stability estimate" + (" (strong)" if strong_nu else ""),
                                         float(lhs_p.mean()), float(rhs_p.mean()), se, detail)


def _shift_b(coeffs: CoefficientSet, vec: np.ndarray) -> CoefficientSet:
    base = coeffs.b

    def b(t, x, y, z, r):
        return base(t, x, y, z, r) + vec
    return coeffs.replace(b=b)


def stability_scaling(coeffs: CoefficientSet, direction, h: float, grid: TimeGrid, noise: NoiseBundle,
                      strong_nu: float | None = None, config: PicardConfig | None = None,
                      band: tuple = (3.0, 5.3)) -> VerificationReport:
    """Perturb b by h e and by (h/2) e on fixed noise; the squared distance should shrink about 4-fold."""
    e = np.broadcast_to(np.asarray(direction, dtype=float), (coeffs.n,))
    config = config or PicardConfig(tol=1e-9, max_iter=400, sweep="splitting", damping=1.0)
    base = solve_picard(coeffs, grid, noise, config)[0]
    out = {}
    for tag, s in (("h", h), ("h/2", h / 2)):
        th = solve_picard(_shift_b(coeffs, s * e), grid, noise, config)[0]
        dist = weighted_norm_sq(th - base, coeffs.weight_K, grid)
        if strong_nu is not None:
            dy0 = th.y[:, 0].mean(axis=0) - base.y[:, 0].mean(axis=0)
            dist += float(dy0 @ dy0)
        out[tag] = dist
    ratio = out["h"] / out["h/2"] if out["h/2"] > 0 else float("inf")
    lo, hi = band
    return VerificationReport("stability scaling" + (" (strong)" if strong_nu is not None else ""),
                              lhs=ratio, rhs=4.0, standard_error=0.0, passed=bool(lo <= ratio <= hi),
                              detail={"distance_sq_h": out["h"], "distance_sq_half": out["h/2"], "h": h,
                                      "band": list(band)})


def comparison_check(coeffs: CoefficientSet, phi1: Callable, phi2: Callable, grid: TimeGrid, noise: NoiseBundle,
                     config: PicardConfig | None = None, tol: float = 1e-8, floor: float = 0.0,
                     solutions=None) -> dict:
    """Solve with Phi1 and Phi2 on common noise and report the comparison quantities.

    Returns y_hat0, its standard error, the averaged <x^, y^> series with
    pointwise standard errors, the first grid time tau_hat at which the
    series falls below ``tol`` and the verdict for n = 1.
    """
    if solutions is None:
        th1 = solve_picard(coeffs.replace(phi=phi1), grid, noise, config)[0]
        th2 = solve_picard(coeffs.replace(phi=phi2), grid, noise, config)[0]
    else:
        th1, th2 = solutions
    M = noise.M
    dy = th1.y - th2.y
    dx = th1.x - th2.x
    y_hat0 = dy[:, 0].mean(axis=0)
    se0 = np.std(dy[:, 1], axis=0) / math.sqrt(M) if M > 1 else np.zeros_like(y_hat0)
    inner = np.sum(dx * dy, axis=2)
    series = inner.mean(axis=0)
    series_se = inner.std(axis=0) / math.sqrt(M) if M > 1 else np.zeros_like(series)
    below = np.nonzero(series < tol)[0]
    tau_hat = float(grid.times[below[0]]) if below.size else None
    out = {
        "y_hat0": y_hat0.tolist(),
        "y_hat0_se": np.atleast_1d(se0).tolist(),
        "inner_product_series": series.tolist(),
        "inner_product_se": series_se.tolist(),
        "tau_hat": tau_hat,
        "series_nonnegative": bool(np.all(series >= -3 * series_se - floor)),
    }
    if coeffs.n == 1:
        y2_0 = th2.y[:, 0].mean(axis=0)
        gap = float(np.atleast_1d(phi1(y2_0))[0] - np.atleast_1d(phi2(y2_0))[0])
        yh, se = float(y_hat0[0]), float(np.atleast_1d(se0)[0])
        if gap > 0:
            case, ok = "i", yh > 3 * se
        elif gap < 0:
            case, ok = "i-mirror", yh < -3 * se
        else:
            case, ok = "ii", abs(yh) <= 3 * se + floor
        out.update({"phi_gap": gap, "case": case, "verdict": bool(ok)})
    return out
