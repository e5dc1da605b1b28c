"""Backward stochastic linear-quadratic control on [0, infinity).

The controlled state is the linear backward equation

    -dy = [A y + sum_i B_i z_i + sum_ij C_ij r_ij pi_ij + D v + alpha] dt - z dW - r dN~

with quadratic cost

    J(v) = 1/2 <Q y(0), y(0)> + 1/2 E int [<L y, y> + sum <M_i z_i, z_i>
           + sum <S_ij r_ij, r_ij> pi_ij + <R v, v>] dt.

The optimal control is u = R^{-1} D^T x where x is the forward (adjoint)
component of the Hamiltonian system assembled by ``assemble_hamiltonian_system``.
Matrices may be constants or callables of t. Shapes: A, L, Q (n, n);
B, M (d, n, n); C, S (l, m, n, n); D (n, k); R (k, k); alpha (n,).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .bsde import BsdeDriver, BsdeSolution, _path_constant, solve_finite
from .errors import AssumptionError, ShapeError, ValidationError
from .fbsde import PicardConfig, solve_continuation, solve_picard
from .model import (
    BsdeParams,
    CoefficientSet,
    MarkSpace,
    ThetaPath,
    TimeGrid,
    VerificationReport,
    check_lq_assumptions,
)
from .noise import NoiseBundle

__all__ = [
    "LQSpec",
    "ControlSolution",
    "assemble_hamiltonian_system",
    "operator_matrix",
    "controlled_state",
    "evaluate_cost",
    "solve_soc",
    "duality_residual",
    "optimality_test",
    "perturbation_directions",
    "quadratic_fit",
    "increment_report",
    "control_law",
]


def _mat(a, t) -> np.ndarray:
    return np.asarray(a(t) if callable(a) else a, dtype=float)


@dataclass
class LQSpec:
    n: int
    k: int
    A: object
    D: object
    Q: object
    L: object
    R: object
    K: float
    d: int = 0
    marks: MarkSpace = field(default_factory=MarkSpace.empty)
    B: object = None
    C: object = None
    M: object = None
    S: object = None
    alpha: object = None
    mu: float | None = None
    name: str = ""

    def __post_init__(self):
        n, k, d = self.n, self.k, self.d
        l, m = self.marks.l, self.marks.m
        if self.B is None:
            self.B = np.zeros((d, n, n))
        if self.C is None:
            self.C = np.zeros((l, m, n, n))
        if self.M is None:
            self.M = np.zeros((d, n, n))
        if self.S is None:
            self.S = np.zeros((l, m, n, n))
        if self.alpha is None:
            self.alpha = np.zeros(n)
        expected = {"A": (n, n), "D": (n, k), "Q": (n, n), "L": (n, n), "R": (k, k), "B": (d, n, n),
                    "C": (l, m, n, n), "M": (d, n, n), "S": (l, m, n, n), "alpha": (n,)}
        for nm, shape in expected.items():
            val = _mat(getattr(self, nm), 0.0)
            if val.shape != shape:
                raise ValidationError(f"{nm} has shape {val.shape}, expected {shape}")
        if not self.K > 0:
            raise ValidationError("K must be positive")

    def at(self, t: float) -> dict:
        """All coefficient matrices at time t."""
        return {nm: _mat(getattr(self, nm), t) for nm in ("A", "B", "C", "D", "Q", "L", "M", "S", "R", "alpha")}

    @property
    def time_dependent(self) -> bool:
        return any(callable(getattr(self, nm)) for nm in ("A", "B", "C", "D", "L", "M", "S", "R"))

    def gain(self, t: float) -> np.ndarray:
        """R^{-1} D^T at t, shape (k, n)."""
        return np.linalg.solve(_mat(self.R, t), _mat(self.D, t).T)

    def mu_value(self) -> float:
        rep = [r for r in check_lq_assumptions(self) if r.name == "gap 2mu-K >= 0"][0]
        return float(rep.detail["mu"])


@dataclass
class ControlSolution:
    theta: ThetaPath
    u: np.ndarray
    J_estimate: float
    J_se: float
    reports: list = field(default_factory=list)
    trace: list = field(default_factory=list)
    state: BsdeSolution | None = None
    features: np.ndarray | None = None


# ---------------------------------------------------------------------------
# the Hamiltonian system


def _theta_blocks(n: int, d: int, l: int, m: int):
    sizes = [n, n, n * d, n * l * m]
    edges = np.cumsum([0] + sizes)
    return [slice(edges[i], edges[i + 1]) for i in range(4)]


def operator_matrix(spec: LQSpec, t: float = 0.0) -> np.ndarray:
    """Matrix of the linear part of theta -> (-g, b, sigma, gamma) at t.

    theta is flattened as (x, y, z_1..z_d, r_11..r_lm), each block of length n.
    """
    n, d, l, m = spec.n, spec.d, spec.marks.l, spec.marks.m
    c = spec.at(t)
    rates = spec.marks.intensities
    P = c["D"] @ np.linalg.solve(c["R"], c["D"].T)
    sx, sy, sz, sr = _theta_blocks(n, d, l, m)
    tot = sr.stop
    op = np.zeros((tot, tot))
    # -g
    op[sx, sx] = -P
    op[sx, sy] = -c["A"]
    for i in range(d):
        op[sx, sz.start + i * n: sz.start + (i + 1) * n] = -c["B"][i]
    for a in range(l):
        for b in range(m):
            j = a * m + b
            op[sx, sr.start + j * n: sr.start + (j + 1) * n] = -rates[a, b] * c["C"][a, b]
    # b
    op[sy, sx] = c["A"].T
    op[sy, sy] = -c["L"]
    # sigma
    for i in range(d):
        rows = slice(sz.start + i * n, sz.start + (i + 1) * n)
        op[rows, sx] = c["B"][i].T
        op[rows, rows] = -c["M"][i]
    # gamma
    for a in range(l):
        for b in range(m):
            j = a * m + b
            rows = slice(sr.start + j * n, sr.start + (j + 1) * n)
            op[rows, sx] = c["C"][a, b].T
            op[rows, rows] = -c["S"][a, b]
    return op


def _lipschitz(spec: LQSpec, times) -> float:
    # operator norm in the pi-weighted inner product
    n, d, l, m = spec.n, spec.d, spec.marks.l, spec.marks.m
    w = np.ones(_theta_blocks(n, d, l, m)[3].stop)
    rates = spec.marks.intensities.reshape(-1)
    sr = _theta_blocks(n, d, l, m)[3]
    for j, p in enumerate(rates):
        w[sr.start + j * n: sr.start + (j + 1) * n] = p
    keep = w > 0
    sq = np.sqrt(w[keep])
    out = 0.0
    for t in times:
        op = operator_matrix(spec, t)[np.ix_(keep, keep)]
        out = max(out, float(np.linalg.norm(sq[:, None] * op / sq[None, :], 2)))
    return out


def assemble_hamiltonian_system(spec: LQSpec, noise_only_features: bool = True) -> CoefficientSet:
    """Linear FBSDE whose forward part is the adjoint x and backward part the state (y, z, r).

    b = A^T x - L y, sigma_i = B_i^T x - M_i z_i, gamma_ij = C_ij^T x - S_ij r_ij,
    g = D R^{-1} D^T x + A y + sum B_i z_i + sum C_ij r_ij pi_ij + alpha, Phi(y) = -Q y.

    With ``noise_only_features`` the backward regressions use the noise alone,
    so the backward sweep coincides with the state equation for v = u.
    """
    n, d = spec.n, spec.d
    rates = spec.marks.intensities
    l, m = spec.marks.l, spec.marks.m
    const = not spec.time_dependent
    c0 = spec.at(0.0)
    P0 = c0["D"] @ np.linalg.solve(c0["R"], c0["D"].T)

    def cf(t):
        if const:
            return c0, P0
        c = spec.at(t)
        return c, c["D"] @ np.linalg.solve(c["R"], c["D"].T)

    def b(t, x, y, z, r):
        c, _ = cf(t)
        return x @ c["A"] - y @ c["L"].T

    def sigma(t, x, y, z, r):
        c, _ = cf(t)
        out = np.empty(x.shape + (d,))
        for i in range(d):
            out[:, :, i] = x @ c["B"][i] - z[:, :, i] @ c["M"][i].T
        return out

    def gamma(t, x, y, z, r):
        c, _ = cf(t)
        out = np.empty(x.shape + (l, m))
        for a in range(l):
            for e in range(m):
                out[:, :, a, e] = x @ c["C"][a, e] - r[:, :, a, e] @ c["S"][a, e].T
        return out

    def g(t, x, y, z, r):
        c, P = cf(t)
        out = x @ P.T + y @ c["A"].T
        for i in range(d):
            out = out + z[:, :, i] @ c["B"][i].T
        for a in range(l):
            for e in range(m):
                out = out + rates[a, e] * (r[:, :, a, e] @ c["C"][a, e].T)
        alpha = _mat(spec.alpha, t)
        return out + alpha

    Q = _mat(spec.Q, 0.0)

    def phi(y0):
        return -Q @ np.asarray(y0, dtype=float)

    times = np.linspace(0.0, 10.0, 11) if not const else [0.0]
    mu = spec.mu if spec.mu is not None else spec.mu_value()
    features = None
    if noise_only_features:
        def features(x):
            return np.zeros(x.shape[:2] + (0,))
    return CoefficientSet(b, sigma if d else None, gamma if l * m else None, g, phi,
                          lipschitz_C=max(_lipschitz(spec, times), mu), monotone_mu=mu, weight_K=spec.K,
                          n=n, d=d, marks=spec.marks, features=features, name=spec.name or "lq-hamiltonian")


# ---------------------------------------------------------------------------
# state equation and cost


def _control_array(v, spec: LQSpec, grid: TimeGrid, M: int) -> np.ndarray:
    """Control as (P, N+1, k) with P in {1, M}."""
    T = grid.n_steps + 1
    if v is None:
        return np.zeros((1, T, spec.k))
    if callable(v):
        return np.array([np.broadcast_to(np.asarray(v(t), dtype=float), (spec.k,)) for t in grid.times])[None]
    a = np.asarray(v, dtype=float)
    if a.ndim == 2:
        a = a[None]
    if a.ndim != 3 or a.shape[1:] != (T, spec.k) or a.shape[0] not in (1, M):
        raise ShapeError(f"control shape {a.shape} does not match (M, N+1, k) = {(M, T, spec.k)}")
    return a


def _squeeze(a: np.ndarray) -> np.ndarray:
    """Collapse the path axis when every path carries the same values."""
    if a.shape[0] > 1 and np.all(a == a[:1]):
        return a[:1]
    return a


def _state_driver(spec: LQSpec) -> Callable:
    n, d = spec.n, spec.d
    rates = spec.marks.intensities
    l, m = spec.marks.l, spec.marks.m
    const = not spec.time_dependent
    c0 = spec.at(0.0)

    def G(t, y, z, r):
        c = c0 if const else spec.at(t)
        out = y @ c["A"].T
        for i in range(d):
            out = out + z[:, :, i] @ c["B"][i].T
        for a in range(l):
            for e in range(m):
                out = out + rates[a, e] * (r[:, :, a, e] @ c["C"][a, e].T)
        return out
    return G


def controlled_state(spec: LQSpec, v, grid: TimeGrid, noise: NoiseBundle, terminal=None,
                     mode: str = "auto", features: np.ndarray | None = None) -> BsdeSolution:
    """Solve the linear backward state equation for the control ``v`` (array, callable of t or None).

    ``features`` (M, N+1, q) are extra regression variables next to the noise.
    """
    va = _squeeze(_control_array(v, spec, grid, noise.M))
    D = np.array([_mat(spec.D, t) for t in grid.times])
    alpha = np.array([np.broadcast_to(_mat(spec.alpha, t), (spec.n,)) for t in grid.times])
    phi = np.einsum("tnk,ptk->ptn", D, va) + alpha[None]
    times = grid.times if spec.time_dependent else [0.0]
    C0 = max(float(np.linalg.norm(_mat(spec.A, t), 2)) for t in times)
    driver = BsdeDriver(_state_driver(spec), phi, BsdeParams(rho=0.0, C0=C0), m=spec.n)
    return solve_finite(driver, grid, noise, terminal=terminal, mode=mode, features=features)


def _cost_paths(spec: LQSpec, v: np.ndarray, sol: BsdeSolution, grid: TimeGrid) -> np.ndarray:
    """Per-path cost with the left-endpoint rule on [0, t_max)."""
    dt = grid.dt
    rates = spec.marks.intensities
    y, z, r = sol.y, sol.z, sol.r
    Mp = y.shape[0]
    Q = _mat(spec.Q, 0.0)
    y0 = y[:, 0]
    J = 0.5 * np.einsum("pi,ij,pj->p", y0, Q, y0)
    v = np.broadcast_to(v, (Mp,) + v.shape[1:])
    run = np.zeros(Mp)
    for k in range(grid.n_steps):
        c = spec.at(grid.times[k]) if (spec.time_dependent or k == 0) else c
        val = np.einsum("pi,ij,pj->p", y[:, k], c["L"], y[:, k])
        for i in range(spec.d):
            val += np.einsum("pi,ij,pj->p", z[:, k, :, i], c["M"][i], z[:, k, :, i])
        for a in range(spec.marks.l):
            for e in range(spec.marks.m):
                rr = r[:, k, :, a, e]
                val += rates[a, e] * np.einsum("pi,ij,pj->p", rr, c["S"][a, e], rr)
        val += np.einsum("pi,ij,pj->p", v[:, k], c["R"], v[:, k])
        run += val
    return J + 0.5 * dt * run


def evaluate_cost(spec: LQSpec, v, grid: TimeGrid, noise: NoiseBundle, terminal=None, return_state: bool = False,
                  features: np.ndarray | None = None):
    """Monte Carlo estimate of J(v) and its standard error.

    The integral is truncated at t_max (no discounting). Returns ``(J, SE)``,
    or ``(J, SE, state)`` with ``return_state``.
    """
    va = _squeeze(_control_array(v, spec, grid, noise.M))
    sol = controlled_state(spec, va, grid, noise, terminal=terminal, features=features)
    per = _cost_paths(spec, va, sol, grid)
    if np.all(per == per[0]):
        J, se = float(per[0]), 0.0
    else:
        J, se = float(per.mean()), float(per.std() / math.sqrt(per.size))
    return (J, se, sol) if return_state else (J, se)


# ---------------------------------------------------------------------------
# solving the control problem


def control_law(spec: LQSpec, x: np.ndarray, grid: TimeGrid) -> np.ndarray:
    """u = R^{-1} D^T x at every grid point."""
    if spec.time_dependent:
        G = np.array([spec.gain(t) for t in grid.times])
        return np.einsum("tkn,ptn->ptk", G, x)
    return x @ spec.gain(0.0).T


def solve_soc(spec: LQSpec, grid: TimeGrid, noise: NoiseBundle, solver: str = "picard",
              config: PicardConfig | None = None, check: bool = True,
              noise_only_features: bool = True) -> ControlSolution:
    """Solve the Hamiltonian system, read off u = R^{-1} D^T x and estimate J(u).

    With ``check`` the positivity and gap conditions must hold, otherwise
    ``AssumptionError`` is raised; the reports are attached either way. The
    state solves use the same regression variables as the backward sweep.
    """
    reports = check_lq_assumptions(spec)
    if check and not all(r.passed for r in reports):
        failed = [r.name for r in reports if not r.passed]
        raise AssumptionError(f"control problem assumptions fail: {failed}")
    coeffs = assemble_hamiltonian_system(spec, noise_only_features)
    trace = []
    if solver == "picard":
        theta, trace = solve_picard(coeffs, grid, noise, config or PicardConfig(tol=1e-9, max_iter=400))
    elif solver == "continuation":
        theta, st = solve_continuation(coeffs, grid, noise)
        trace = st.level_trace
    else:
        raise ValidationError(f"unknown solver {solver!r}")
    u = control_law(spec, theta.x, grid)
    feats = None if coeffs.features is not None or _path_constant(theta.x) else theta.x
    J, se, state = evaluate_cost(spec, u, grid, noise, return_state=True, features=feats)
    return ControlSolution(theta, u, J, se, reports, trace, state, feats)


# ---------------------------------------------------------------------------
# duality and optimality


def duality_residual(sol: ControlSolution, v, spec: LQSpec, grid: TimeGrid, noise: NoiseBundle,
                     floor: float = 1e-9) -> dict:
    """Estimate Lambda for the perturbation control v.

    ``lambda_raw`` is the left-endpoint value of
    <Q y(0), dy(0)> + E int [<L y, dy> + <M z, dz> + <S r, dr> pi + <R u, v - u>] dt
    with dy = y^v - y^u. On a grid this differs from zero by the discrete
    quadratic covariation sum <x_{k+1} - x_k, dy_{k+1} - dy_k> minus its
    continuous-time limit dt (<sigma, dz> + <gamma, dr> pi); ``correction``
    holds that term and ``lambda_hat = lambda_raw - correction`` is, path by
    path, a sum of martingale increments. ``passed`` means
    |lambda_hat| <= 3 SE + floor * scale.
    """
    M, dt, N = noise.M, grid.dt, grid.n_steps
    rates = spec.marks.intensities
    l, m = spec.marks.l, spec.marks.m
    va = np.broadcast_to(_control_array(v, spec, grid, M), (M, N + 1, spec.k))
    ua = np.broadcast_to(sol.u, (M, N + 1, spec.k))
    su = sol.state if sol.state is not None else controlled_state(spec, sol.u, grid, noise, features=sol.features)
    sv = controlled_state(spec, _squeeze(np.asarray(va)), grid, noise, features=sol.features)
    dy, dz, dr = sv.y - su.y, sv.z - su.z, sv.r - su.r
    dv = va - ua
    x = sol.theta.x
    Q = _mat(spec.Q, 0.0)
    terms = np.einsum("pi,ij,pj->p", su.y[:, 0], Q, dy[:, 0])
    corr = np.zeros(M)
    scale = np.abs(terms).copy()
    coeffs = assemble_hamiltonian_system(spec)
    for k in range(N):
        t = grid.times[k]
        c = spec.at(t)
        yk, zk, rk = su.y[:, k], su.z[:, k], su.r[:, k]
        parts = [np.einsum("pi,ij,pj->p", yk, c["L"], dy[:, k]),
                 np.einsum("pi,ij,pj->p", ua[:, k], c["R"], dv[:, k])]
        for i in range(spec.d):
            parts.append(np.einsum("pi,ij,pj->p", zk[:, :, i], c["M"][i], dz[:, k, :, i]))
        for a in range(l):
            for e in range(m):
                parts.append(rates[a, e] * np.einsum("pi,ij,pj->p", rk[:, :, a, e], c["S"][a, e],
                                                     dr[:, k, :, a, e]))
        for p_ in parts:
            terms = terms + dt * p_
            scale = scale + dt * np.abs(p_)
        # discrete covariation minus its limit
        cov = np.sum((x[:, k + 1] - x[:, k]) * (dy[:, k + 1] - dy[:, k]), axis=1)
        args = (t, x[:, k], su.y[:, k], zk, rk)
        lim = np.zeros(M)
        if spec.d:
            lim += np.sum(coeffs.eval_sigma(*args) * dz[:, k], axis=(1, 2))
        if l * m:
            lim += np.sum(coeffs.eval_gamma(*args) * dr[:, k] * rates, axis=(1, 2, 3))
        corr = corr + cov - dt * lim
    lam = terms - corr
    se = float(lam.std() / math.sqrt(M)) if M > 1 else 0.0
    value = float(lam.mean())
    tol = floor * max(1.0, float(scale.mean()))
    return {"lambda_hat": value, "se": se, "lambda_raw": float(terms.mean()), "correction": float(corr.mean()),
            "scale": float(scale.mean()), "passed": bool(abs(value) <= 3 * se + tol)}


def perturbation_directions(noise: NoiseBundle, grid: TimeGrid, k: int, count: int, seed: int = 0,
                            deterministic: bool = False, feedback: np.ndarray | None = None) -> list[np.ndarray]:
    """Adapted perturbation directions, shape (1 or M, N+1, k) each.

    The first entries come from a fixed dictionary (constants and e^{-a t}
    profiles per control coordinate, then e^{-t/2} times a coordinate of the
    ``feedback`` state when one is given); the rest are random mixtures of
    decaying profiles and, unless ``deterministic``, of e^{-t} W(t) and
    e^{-t} N~(t).
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(7,)))
    t = grid.times
    prof = [np.ones_like(t), np.exp(-0.5 * t), np.exp(-t), np.exp(-2.0 * t)]
    out = []
    for pr in prof:
        for j in range(k):
            w = np.zeros((1, t.size, k))
            w[0, :, j] = pr
            out.append(w)
    if feedback is not None:
        fb = np.asarray(feedback, dtype=float)
        for j in range(k):
            w = np.zeros(fb.shape[:2] + (k,))
            w[:, :, j] = np.exp(-0.5 * t)[None] * fb[:, :, j % fb.shape[2]]
            out.append(w)
    Wc = noise.cumulative_brownian() if noise.d else None
    Nc = noise.cumulative_compensated().reshape(noise.M, t.size, -1) if noise.rates.size else None
    while len(out) < count:
        c = rng.standard_normal((len(prof), k))
        w = np.einsum("at,ak->tk", np.array(prof), c)[None]
        if not deterministic:
            extra = np.zeros((noise.M, t.size, k))
            decay = np.exp(-t)[None, :, None]
            if Wc is not None:
                extra += decay * np.einsum("ptd,dk->ptk", Wc, rng.standard_normal((noise.d, k)))
            if Nc is not None and Nc.shape[2]:
                extra += decay * np.einsum("ptj,jk->ptk", Nc, rng.standard_normal((Nc.shape[2], k)))
            w = w + extra
        out.append(w)
    return out[:count]


def quadratic_fit(eps, diffs) -> dict:
    """Least-squares fit diffs = a eps^2 + b eps; R^2 of the fit about the mean."""
    eps = np.asarray(eps, dtype=float)
    diffs = np.asarray(diffs, dtype=float)
    X = np.stack([eps ** 2, eps], axis=1)
    coef, *_ = np.linalg.lstsq(X, diffs, rcond=None)
    fit = X @ coef
    ss_tot = float(np.sum((diffs - diffs.mean()) ** 2))
    ss_res = float(np.sum((diffs - fit) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else (1.0 if ss_res == 0 else 0.0)
    return {"a": float(coef[0]), "b": float(coef[1]), "r2": r2}


def _weighted_sq(w: np.ndarray, grid: TimeGrid) -> float:
    return float(np.mean(np.sum(w[:, :-1] ** 2, axis=(1, 2))) * grid.dt)


def increment_report(name: str, spec: LQSpec, base: np.ndarray, dirs: list, embed: Callable, r_min: float,
                     grid: TimeGrid, noise: NoiseBundle, eps_grid=(0.1, 0.2, 0.4), features=None,
                     base_state: BsdeSolution | None = None, deterministic: bool = False) -> VerificationReport:
    """Cost increments J(base + eps embed(w)) - J(base) on common noise.

    For each direction the increments are fitted by a eps^2 + b eps and a is
    compared with the lower bound min-eig(R) |w|^2 / 2. ``passed`` requires
    every increment >= -3 SE and every a > 0; lhs is minus the worst
    increment, checked against rhs = 0 with that increment's SE.
    """
    base = _squeeze(np.asarray(base, dtype=float))
    state_b = base_state if base_state is not None else controlled_state(spec, base, grid, noise, features=features)
    per_b = np.broadcast_to(_cost_paths(spec, base, state_b, grid), (noise.M,))
    J0 = float(per_b.mean())
    rows = []
    worst = (math.inf, 0.0)
    all_ok = True
    for idx, w in enumerate(dirs):
        diffs, ses = [], []
        shift = embed(w)
        for eps in eps_grid:
            v = _squeeze(np.broadcast_to(base + eps * shift, (noise.M,) + base.shape[1:]).copy())
            st = controlled_state(spec, v, grid, noise, features=features)
            dd = np.broadcast_to(_cost_paths(spec, v, st, grid), (noise.M,)) - per_b
            diff = float(dd.mean())
            se = float(dd.std() / math.sqrt(noise.M)) if noise.M > 1 and not np.all(dd == dd[0]) else 0.0
            diffs.append(diff)
            ses.append(se)
            all_ok &= diff >= -3 * se - 1e-12 * max(1.0, abs(J0))
            if diff + 3 * se < worst[0] + 3 * worst[1]:
                worst = (diff, se)
        fit = quadratic_fit(eps_grid, diffs)
        bound = 0.5 * r_min * _weighted_sq(np.broadcast_to(w, (noise.M,) + w.shape[1:]), grid)
        rows.append({"direction": idx, "increments": diffs, "se": ses, "a": fit["a"], "b": fit["b"],
                     "r2": fit["r2"], "a_lower_bound": bound})
    a_pos = all(r["a"] > 0 for r in rows)
    detail = {"rows": rows, "J_base": J0, "eps_grid": list(eps_grid), "all_non_negative": bool(all_ok),
              "a_positive": bool(a_pos), "min_r2": min(r["r2"] for r in rows) if rows else 1.0,
              "min_a_ratio": min(r["a"] / r["a_lower_bound"] for r in rows if r["a_lower_bound"] > 0)
              if rows else float("inf"), "deterministic": deterministic}
    return VerificationReport(name, lhs=-worst[0], rhs=0.0, standard_error=worst[1],
                              passed=bool(all_ok and a_pos), detail=detail)


def _min_eig_over(a, grid: TimeGrid, time_dependent: bool) -> float:
    return min(float(np.min(np.linalg.eigvalsh(_mat(a, t)))) for t in (grid.times if time_dependent else [0.0]))


def optimality_test(sol: ControlSolution, spec: LQSpec, grid: TimeGrid, noise: NoiseBundle,
                    n_perturbations: int = 50, eps_grid=(0.1, 0.2, 0.4), seed: int = 0,
                    deterministic: bool | None = None) -> VerificationReport:
    """J(u + eps w) - J(u) >= -3 SE over perturbation directions and eps values (see ``increment_report``).

    ``deterministic`` restricts the directions to functions of time; by
    default it is chosen when u itself is deterministic.
    """
    if deterministic is None:
        deterministic = bool(np.all(sol.u == sol.u[:1]))
    dirs = perturbation_directions(noise, grid, spec.k, n_perturbations, seed, deterministic)
    r_min = _min_eig_over(spec.R, grid, spec.time_dependent)
    return increment_report("optimality J(u+eps w) - J(u) >= -3 SE", spec, sol.u, dirs, lambda w: w, r_min,
                            grid, noise, eps_grid, sol.features, sol.state, deterministic)
