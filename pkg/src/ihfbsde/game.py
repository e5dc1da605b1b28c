"""Two-player nonzero-sum backward linear-quadratic game on [0, infinity).

Both players act on the shared backward state

    -dy = [A y + sum_j B_j z_j + sum C r pi + D_1 v_1 + D_2 v_2 + alpha] dt - z dW - r dN~

and player i minimises

    J_i = 1/2 <Q_i y(0), y(0)> + 1/2 E int [<L_i y, y> + sum <M_ij z_j, z_j>
          + sum <S_ij r_j, r_j> pi + <R_i v_i, v_i>] dt.

The equilibrium controls are u_i = R_i^{-1} D_i^T x_i where (x_1, x_2, y, z, r)
solves a system with two forward adjoints and one backward state. With
P_i = D_i R_i^{-1} D_i^T constant and commuting with A^T, B_j^T, C^T, the
combination xbar = P_1 x_1 + P_2 x_2 satisfies a single-adjoint system of the
control-problem type, which is what ``hamadene_transform`` builds. Shapes
follow ``lq``: per-player M_i is (d, n, n) and S_i is (l, m, n, n).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import block_diag

from .errors import AssumptionError, LiftError, TransformError, ValidationError
from .fbsde import PicardConfig, solve_forward, solve_picard
from .lq import (
    LQSpec,
    _lipschitz,
    _mat,
    _min_eig_over,
    assemble_hamiltonian_system,
    evaluate_cost,
    increment_report,
    perturbation_directions,
)
from .model import (
    CoefficientSet,
    MarkSpace,
    ThetaPath,
    TimeGrid,
    VerificationReport,
    _require_symmetric,
    check_game_assumptions,
    game_weight,
)
from .noise import NoiseBundle

__all__ = [
    "GameSpec",
    "NashSolution",
    "assemble_game_system",
    "reduced_spec",
    "hamadene_transform",
    "lift_solution",
    "solve_nash",
    "deviation_test",
    "player_cost_spec",
    "player_control_spec",
    "transform_agreement",
]

UNIQUENESS = "uniqueness: P_i, L_i, M_ij, S_ij >= mu I"


def _pair(v, name: str) -> tuple:
    if v is None or isinstance(v, (str, bytes)) or len(v) != 2:
        raise ValidationError(f"{name} must hold one entry per player")
    return tuple(v)


@dataclass
class GameSpec:
    n: int
    k: tuple
    A: object
    D: tuple
    Q: tuple
    L: tuple
    R: tuple
    K: float
    d: int = 0
    marks: MarkSpace = field(default_factory=MarkSpace.empty)
    B: object = None
    C: object = None
    M: tuple | None = None
    S: tuple | None = None
    alpha: object = None
    mu: float | None = None
    name: str = ""

    def __post_init__(self):
        n, d = self.n, self.d
        l, m = self.marks.l, self.marks.m
        self.k = tuple(int(v) for v in _pair(self.k, "k"))
        for nm in ("D", "Q", "L", "R"):
            setattr(self, nm, _pair(getattr(self, nm), nm))
        if self.B is None:
            self.B = np.zeros((d, n, n))
        if self.C is None:
            self.C = np.zeros((l, m, n, n))
        self.M = (np.zeros((d, n, n)),) * 2 if self.M is None else _pair(self.M, "M")
        self.S = (np.zeros((l, m, n, n)),) * 2 if self.S is None else _pair(self.S, "S")
        if self.alpha is None:
            self.alpha = np.zeros(n)
        # each player's data must form a valid control problem
        for i in range(2):
            ps = player_control_spec(self, i)
            c = ps.at(0.0)
            _require_symmetric(f"Q_{i + 1}", c["Q"])
            _require_symmetric(f"L_{i + 1}", c["L"])
            _require_symmetric(f"R_{i + 1}", c["R"])
            for j in range(d):
                _require_symmetric(f"M_{i + 1}{j + 1}", c["M"][j])
            for a in range(l):
                for e in range(m):
                    _require_symmetric(f"S_{i + 1}{a + 1}", c["S"][a, e])
            if np.min(np.linalg.eigvalsh(c["R"])) <= 0:
                raise ValidationError(f"R_{i + 1} must be positive definite")

    @property
    def time_dependent(self) -> bool:
        fields = [self.A, self.B, self.C, *self.D, *self.L, *self.M, *self.S, *self.R]
        return any(callable(f) for f in fields)

    def weights(self, t: float = 0.0) -> tuple:
        """(P_1, P_2) with P_i = D_i R_i^{-1} D_i^T at t."""
        return tuple(game_weight(_mat(self.D[i], t), _mat(self.R[i], t)) for i in range(2))

    def gain(self, i: int, t: float = 0.0) -> np.ndarray:
        """R_i^{-1} D_i^T at t, shape (k_i, n)."""
        return np.linalg.solve(_mat(self.R[i], t), _mat(self.D[i], t).T)

    def mu_value(self) -> float:
        rep = [r for r in check_game_assumptions(self) if r.name.startswith("gap")][0]
        return float(rep.detail["mu"])


@dataclass
class NashSolution:
    x1: np.ndarray
    x2: np.ndarray
    theta: ThetaPath
    u1: np.ndarray
    u2: np.ndarray
    J1: float
    J2: float
    J1_se: float
    J2_se: float
    reports: list = field(default_factory=list)
    reconstruction: dict = field(default_factory=dict)
    trace: list = field(default_factory=list)
    route: str = "transform"

    @property
    def controls(self) -> tuple:
        return self.u1, self.u2


# ---------------------------------------------------------------------------
# per-player views as control problems


def player_control_spec(spec: GameSpec, i: int, mu: float | None = 1.0) -> LQSpec:
    """Player i's control problem with the opponent switched off (D_{3-i} = 0)."""
    return LQSpec(n=spec.n, k=spec.k[i], A=spec.A, D=spec.D[i], Q=spec.Q[i], L=spec.L[i], R=spec.R[i],
                  K=spec.K, d=spec.d, marks=spec.marks, B=spec.B, C=spec.C, M=spec.M[i], S=spec.S[i],
                  alpha=spec.alpha, mu=mu, name=f"{spec.name or 'game'}-player{i + 1}")


def player_cost_spec(spec: GameSpec, i: int) -> LQSpec:
    """Control problem in the joint control (v_1, v_2) carrying player i's cost.

    D = [D_1 | D_2] and R is block diagonal with R_i in player i's block and
    zeros in the opponent's, so the state is shared and the cost is J_i.
    """
    k1, k2 = spec.k

    def D(t):
        return np.hstack([_mat(spec.D[0], t).reshape(spec.n, k1), _mat(spec.D[1], t).reshape(spec.n, k2)])

    def R(t):
        blocks = [np.zeros((k1, k1)), np.zeros((k2, k2))]
        blocks[i] = _mat(spec.R[i], t).reshape(spec.k[i], spec.k[i])
        return block_diag(*blocks)

    const = not any(callable(f) for f in (*spec.D, *spec.R))
    return LQSpec(n=spec.n, k=k1 + k2, A=spec.A, D=D(0.0) if const else D, Q=spec.Q[i], L=spec.L[i],
                  R=R(0.0) if const else R, K=spec.K, d=spec.d, marks=spec.marks, B=spec.B, C=spec.C,
                  M=spec.M[i], S=spec.S[i], alpha=spec.alpha, mu=1.0,
                  name=f"{spec.name or 'game'}-cost{i + 1}")


# ---------------------------------------------------------------------------
# the two-adjoint system


def assemble_game_system(spec: GameSpec, noise_only_features: bool = True) -> CoefficientSet:
    """Forward (x_1, x_2) stacked into width 2n, backward (y, z, r) of width n.

    b = (A^T x_i - L_i y)_i, sigma_j = (B_j^T x_i - M_ij z_j)_i,
    gamma = (C^T x_i - S_i r)_i, g = P_1 x_1 + P_2 x_2 + A y + sum B z + sum C r pi + alpha,
    Phi(y) = (-Q_1 y, -Q_2 y).
    """
    n, d = spec.n, spec.d
    rates = spec.marks.intensities
    l, m = spec.marks.l, spec.marks.m
    players = [player_control_spec(spec, i) for i in range(2)]
    const = not spec.time_dependent
    c0 = [p.at(0.0) for p in players]
    W0 = spec.weights(0.0)

    def cf(t):
        if const:
            return c0, W0
        return [p.at(t) for p in players], spec.weights(t)

    def b(t, x, y, z, r):
        c, _ = cf(t)
        return np.concatenate([x[:, i * n:(i + 1) * n] @ c[i]["A"] - y @ c[i]["L"].T for i in range(2)], axis=1)

    def sigma(t, x, y, z, r):
        c, _ = cf(t)
        out = np.empty(x.shape + (d,))
        for i in range(2):
            xi = x[:, i * n:(i + 1) * n]
            for j in range(d):
                out[:, i * n:(i + 1) * n, j] = xi @ c[i]["B"][j] - z[:, :, j] @ c[i]["M"][j].T
        return out

    def gamma(t, x, y, z, r):
        c, _ = cf(t)
        out = np.empty(x.shape + (l, m))
        for i in range(2):
            xi = x[:, i * n:(i + 1) * n]
            for a in range(l):
                for e in range(m):
                    out[:, i * n:(i + 1) * n, a, e] = xi @ c[i]["C"][a, e] - r[:, :, a, e] @ c[i]["S"][a, e].T
        return out

    def g(t, x, y, z, r):
        c, W = cf(t)
        c = c[0]
        out = x[:, :n] @ W[0].T + x[:, n:] @ W[1].T + y @ c["A"].T
        for j in range(d):
            out = out + z[:, :, j] @ c["B"][j].T
        for a in range(l):
            for e in range(m):
                out = out + rates[a, e] * (r[:, :, a, e] @ c["C"][a, e].T)
        return out + _mat(spec.alpha, t)

    Q = [_mat(q, 0.0) for q in spec.Q]

    def phi(y0):
        y0 = np.asarray(y0, dtype=float)
        return np.concatenate([-Q[0] @ y0, -Q[1] @ y0])

    times = [0.0] if const else np.linspace(0.0, 10.0, 11)
    lip = max(max(_lipschitz(p, times) for p in players),
              max(float(np.linalg.norm(np.hstack(spec.weights(t)), 2)) for t in times))
    mu = min(spec.mu if spec.mu is not None else spec.mu_value(), 1.0)
    features = None
    if noise_only_features:
        def features(x):
            return np.zeros(x.shape[:2] + (0,))
    return CoefficientSet(b, sigma if d else None, gamma if l * m else None, g, phi, lipschitz_C=max(lip, mu),
                          monotone_mu=mu, weight_K=spec.K, n=2 * n, d=d, marks=spec.marks, n_y=n,
                          features=features, name=spec.name or "game-system")


# ---------------------------------------------------------------------------
# the linear reduction


def _combined(spec: GameSpec, name: str, t: float) -> np.ndarray:
    P = spec.weights(t)
    H = [_mat(getattr(spec, name)[i], t) for i in range(2)]
    if H[0].ndim == 2:
        return P[0] @ H[0] + P[1] @ H[1]
    return np.einsum("ij,...jk->...ik", P[0], H[0]) + np.einsum("ij,...jk->...ik", P[1], H[1])


def reduced_spec(spec: GameSpec) -> LQSpec:
    """Control-problem data of the reduced system: D = R = I, H = P_1 H_1 + P_2 H_2, mu = min(mu, 1).

    The combined matrices need not be symmetric, so the result bypasses the
    symmetry checks of a genuine control problem and is only meant for
    ``assemble_hamiltonian_system``.
    """
    n = spec.n
    const = not spec.time_dependent

    def comb(name):
        if const:
            return _combined(spec, name, 0.0)
        return lambda t: _combined(spec, name, t)

    mu = min(spec.mu if spec.mu is not None else spec.mu_value(), 1.0)
    return LQSpec(n=n, k=n, A=spec.A, D=np.eye(n), Q=_combined(spec, "Q", 0.0), L=comb("L"), R=np.eye(n),
                  K=spec.K, d=spec.d, marks=spec.marks, B=spec.B, C=spec.C, M=comb("M"), S=comb("S"),
                  alpha=spec.alpha, mu=mu, name=f"{spec.name or 'game'}-reduced")


def hamadene_transform(spec: GameSpec, noise_only_features: bool = True) -> CoefficientSet:
    """Single-adjoint system for xbar = P_1 x_1 + P_2 x_2.

    Raises ``TransformError`` when P_i varies in time or fails to commute
    with A^T, B_j^T or C^T beyond the residual tolerance.
    """
    reports = check_game_assumptions(spec)
    for rep in reports[:2]:
        if not rep.passed:
            raise TransformError(f"reduction invalid: {rep.name} fails (residual {rep.lhs:.3g}, "
                                 f"tolerance {rep.rhs:.3g})")
    return assemble_hamiltonian_system(reduced_spec(spec), noise_only_features)


# ---------------------------------------------------------------------------
# lifting and costs


def _controls(spec: GameSpec, x1: np.ndarray, x2: np.ndarray, grid: TimeGrid) -> tuple:
    out = []
    for i, x in enumerate((x1, x2)):
        if spec.time_dependent:
            G = np.array([spec.gain(i, t) for t in grid.times])
            out.append(np.einsum("tkn,ptn->ptk", G, x))
        else:
            out.append(x @ spec.gain(i, 0.0).T)
    return tuple(out)


def _joint(u1: np.ndarray, u2: np.ndarray) -> np.ndarray:
    P = max(u1.shape[0], u2.shape[0])
    return np.concatenate([np.broadcast_to(u1, (P,) + u1.shape[1:]),
                           np.broadcast_to(u2, (P,) + u2.shape[1:])], axis=2)


def _costs(spec: GameSpec, u1, u2, grid: TimeGrid, noise: NoiseBundle) -> list:
    v = _joint(u1, u2)
    return [evaluate_cost(player_cost_spec(spec, i), v, grid, noise) for i in range(2)]


def _reconstruction(spec: GameSpec, x1, x2, xbar, grid: TimeGrid) -> dict:
    """Per-path sup over the grid of |P_1 x_1 + P_2 x_2 - xbar|, with mean, SE and tolerance 10 (dt + 3 SE)."""
    P = spec.weights(0.0)
    res = x1 @ P[0].T + x2 @ P[1].T - xbar
    per = np.max(np.linalg.norm(res, axis=2), axis=1)
    mean = float(per.mean())
    se = float(per.std() / math.sqrt(per.size)) if per.size > 1 else 0.0
    tol = 10.0 * (grid.dt + 3.0 * se)
    return {"residual": mean, "se": se, "tolerance": tol, "max": float(per.max()), "passed": bool(mean <= tol)}


def lift_solution(reduced_theta: ThetaPath, spec: GameSpec, grid: TimeGrid, noise: NoiseBundle,
                  reports: list | None = None, trace: list | None = None) -> NashSolution:
    """Recover x_1, x_2 from the reduced solution and form the equilibrium.

    Each x_i solves its linear forward equation with (y, z, r) frozen and
    x_i(0) = -Q_i y(0). Raises ``LiftError`` when P_1 x_1 + P_2 x_2 misses
    xbar by more than 10 (dt + 3 SE).
    """
    th = reduced_theta
    y0 = th.y[:, 0].mean(axis=0)
    xs = []
    for i in range(2):
        coeffs = assemble_hamiltonian_system(player_control_spec(spec, i), noise_only_features=True)
        xs.append(solve_forward(coeffs, th, -_mat(spec.Q[i], 0.0) @ y0, grid, noise))
    rec = _reconstruction(spec, xs[0], xs[1], th.x, grid)
    if not rec["passed"]:
        raise LiftError(f"reconstruction residual {rec['residual']:.3g} above {rec['tolerance']:.3g}")
    u1, u2 = _controls(spec, xs[0], xs[1], grid)
    (J1, s1), (J2, s2) = _costs(spec, u1, u2, grid, noise)
    return NashSolution(xs[0], xs[1], th, u1, u2, J1, J2, s1, s2, list(reports or []), rec, list(trace or []),
                        "transform")


def solve_nash(spec: GameSpec, grid: TimeGrid, noise: NoiseBundle, route: str = "transform",
               config: PicardConfig | None = None, check: bool = True) -> NashSolution:
    """Equilibrium controls and costs.

    ``route="transform"`` solves the reduced system and lifts it;
    ``route="direct"`` runs Picard on the two-adjoint system itself. With
    ``check`` every assumption report except the uniqueness condition must
    pass (``AssumptionError`` otherwise); the reports are attached either way.
    """
    reports = check_game_assumptions(spec)
    if check:
        failed = [r.name for r in reports if not r.passed and r.name != UNIQUENESS]
        if failed:
            raise AssumptionError(f"game assumptions fail: {failed}")
    config = config or PicardConfig(tol=1e-9, max_iter=400)
    if route == "transform":
        coeffs = hamadene_transform(spec)
        theta, trace = solve_picard(coeffs, grid, noise, config)
        return lift_solution(theta, spec, grid, noise, reports, trace)
    if route != "direct":
        raise ValidationError(f"unknown route {route!r}")
    coeffs = assemble_game_system(spec)
    full, trace = solve_picard(coeffs, grid, noise, config)
    n = spec.n
    x1, x2 = full.x[:, :, :n], full.x[:, :, n:]
    P = spec.weights(0.0)
    xbar = x1 @ P[0].T + x2 @ P[1].T
    theta = ThetaPath(xbar, full.y, full.z, full.r, noise.rates)
    u1, u2 = _controls(spec, x1, x2, grid)
    (J1, s1), (J2, s2) = _costs(spec, u1, u2, grid, noise)
    rec = _reconstruction(spec, x1, x2, xbar, grid)
    return NashSolution(x1, x2, theta, u1, u2, J1, J2, s1, s2, reports, rec, trace, "direct")


def transform_agreement(a: NashSolution, b: NashSolution, spec: GameSpec, grid: TimeGrid,
                        tol: float) -> VerificationReport:
    """Weighted L2 distance between two equilibria in (x_1, x_2, y, z, r), against ``tol``."""
    K, dt = spec.K, grid.dt
    w = np.exp(K * grid.times[:-1])[None]

    def sq(p, q):
        diff = np.broadcast_to(p, np.broadcast_shapes(p.shape, q.shape)) - q
        axes = tuple(range(2, diff.ndim))
        return float(np.mean(np.sum(np.sum(diff[:, :-1] ** 2, axis=axes) * w, axis=1)) * dt)

    rates = spec.marks.intensities
    total = sq(a.x1, b.x1) + sq(a.x2, b.x2) + sq(a.theta.y, b.theta.y) + sq(a.theta.z, b.theta.z)
    if rates.size:
        dr = a.theta.r - b.theta.r
        total += float(np.mean(np.sum(np.sum(dr[:, :-1] ** 2 * rates, axis=(2, 3, 4)) * w, axis=1)) * dt)
    dist = math.sqrt(total)
    return VerificationReport("direct and transformed equilibria agree", lhs=dist, rhs=tol, standard_error=0.0,
                              passed=bool(dist <= tol), detail={"distance": dist, "J1": (a.J1, b.J1),
                                                                "J2": (a.J2, b.J2)})


# ---------------------------------------------------------------------------
# Nash property


def deviation_test(sol: NashSolution, spec: GameSpec, player: int, grid: TimeGrid, noise: NoiseBundle,
                   n_deviations: int = 50, eps_grid=(0.1, 0.2, 0.4), seed: int = 0,
                   deterministic: bool | None = None) -> VerificationReport:
    """Unilateral deviations u_i + eps w with the opponent's control held fixed.

    ``player`` is 1 or 2. Increments J_i(deviation) - J_i(equilibrium) must
    be >= -3 SE for every direction and eps, with positive eps^2 coefficients
    (see ``lq.increment_report``). Directions include e^{-t/2} y feedback forms.
    """
    if player not in (1, 2):
        raise ValidationError("player must be 1 or 2")
    i = player - 1
    u = (sol.u1, sol.u2)
    if deterministic is None:
        deterministic = bool(np.all(u[i] == u[i][:1]) and np.all(u[1 - i] == u[1 - i][:1]))
    k1, k2 = spec.k
    dirs = perturbation_directions(noise, grid, spec.k[i], n_deviations, seed + 101 * player, deterministic,
                                   feedback=sol.theta.y)

    def embed(w):
        out = np.zeros(w.shape[:2] + (k1 + k2,))
        if i == 0:
            out[:, :, :k1] = w
        else:
            out[:, :, k1:] = w
        return out

    r_min = _min_eig_over(spec.R[i], grid, callable(spec.R[i]))
    rep = increment_report(f"player {player} deviations J_{player}(dev) - J_{player}(eq) >= -3 SE",
                           player_cost_spec(spec, i), _joint(sol.u1, sol.u2), dirs, embed, r_min, grid, noise,
                           eps_grid, deterministic=deterministic)
    rep.detail["player"] = player
    return rep
