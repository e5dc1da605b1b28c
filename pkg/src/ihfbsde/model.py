"""Domain types, weighted norms and assumption checks.

Paths are stored as arrays with a leading path axis and a time axis of
length ``n_steps + 1``:

    x : (M, N+1, n)          forward component
    y : (M, N+1, n_y)        backward component
    z : (M, N+1, n_y, d)     Brownian integrand
    r : (M, N+1, n_y, l, m)  jump integrand, one value per measure and mark

The jump part of every squared norm is weighted by the mark intensities,
so ``|r|^2 = sum_ij |r_ij|^2 pi_ij``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ShapeError, ValidationError

__all__ = [
    "TimeGrid",
    "MarkSpace",
    "ThetaPath",
    "CoefficientSet",
    "BsdeParams",
    "VerificationReport",
    "weighted_norm_sq",
    "weighted_norm_sq_paths",
    "weighted_distance",
    "estimate_monotonicity",
    "box_sampler",
    "check_gaps",
    "check_lq_assumptions",
    "check_game_assumptions",
]


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid on ``[0, t_max]`` with ``n_steps`` intervals."""

    t_max: float
    n_steps: int

    def __post_init__(self):
        if not (np.isfinite(self.t_max) and self.t_max > 0):
            raise ValidationError(f"t_max must be positive, got {self.t_max}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ValidationError(f"n_steps must be a positive integer, got {self.n_steps}")
        object.__setattr__(self, "n_steps", int(self.n_steps))
        object.__setattr__(self, "t_max", float(self.t_max))

    @property
    def dt(self) -> float:
        return self.t_max / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt

    @classmethod
    def from_dt(cls, t_max: float, dt: float) -> "TimeGrid":
        """Grid with step ``dt`` whose horizon is ``t_max`` rounded to a multiple of dt."""
        n = max(1, int(round(t_max / dt)))
        return cls(n * dt, n)

    def extended(self, n_steps: int) -> "TimeGrid":
        """Grid with the same step and ``n_steps`` intervals."""
        return TimeGrid(n_steps * self.dt, n_steps)


@dataclass(frozen=True)
class MarkSpace:
    """Finite mark sets for ``l`` Poisson random measures.

    ``intensities[i, j]`` is the rate of mark ``j`` for measure ``i``. Measures
    with fewer marks are padded with zero intensity.
    """

    intensities: np.ndarray
    marks: tuple = ()

    def __post_init__(self):
        rates = np.atleast_2d(np.asarray(self.intensities, dtype=float))
        if rates.size == 0:
            rates = np.zeros((0, 0))
        if rates.ndim != 2:
            raise ValidationError("intensities must be a 2-d array (measures x marks)")
        if not np.all(np.isfinite(rates)) or np.any(rates < 0):
            raise ValidationError("intensities must be finite and non-negative")
        rates = rates.copy()
        rates.setflags(write=False)
        object.__setattr__(self, "intensities", rates)
        if not self.marks:
            marks = tuple(tuple(f"e{j + 1}" for j in range(rates.shape[1])) for _ in range(rates.shape[0]))
            object.__setattr__(self, "marks", marks)

    @classmethod
    def empty(cls) -> "MarkSpace":
        return cls(np.zeros((0, 0)))

    @classmethod
    def single(cls, rate: float) -> "MarkSpace":
        return cls(np.array([[rate]]))

    @property
    def l(self) -> int:
        return self.intensities.shape[0]

    @property
    def m(self) -> int:
        return self.intensities.shape[1]

    @property
    def rates(self) -> np.ndarray:
        return self.intensities

    def __eq__(self, other):
        return isinstance(other, MarkSpace) and np.array_equal(self.intensities, other.intensities)

    def __hash__(self):
        return hash(self.intensities.tobytes())


def _sq(a: np.ndarray | None, n_lead: int) -> np.ndarray | float:
    """Sum of squares over all trailing axes after the first ``n_lead``."""
    if a is None or a.size == 0:
        return 0.0
    axes = tuple(range(n_lead, a.ndim))
    return np.sum(a * a, axis=axes)


def jump_sq(r: np.ndarray | None, rates: np.ndarray, n_lead: int) -> np.ndarray | float:
    """pi-weighted squared norm of a jump integrand with trailing axes (n, l, m)."""
    if r is None or r.size == 0:
        return 0.0
    w = r * r * rates
    return np.sum(w, axis=tuple(range(n_lead, w.ndim)))


@dataclass
class ThetaPath:
    """Discretised quadruple (x, y, z, r) over paths and grid points."""

    x: np.ndarray | None
    y: np.ndarray
    z: np.ndarray
    r: np.ndarray
    rates: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        if self.y.ndim != 3:
            raise ShapeError("y must have shape (M, N+1, n)")
        M, T, n_y = self.y.shape
        self.rates = np.asarray(self.rates, dtype=float).reshape(
            np.shape(self.rates) if np.size(self.rates) else (0, 0))
        l, m = self.rates.shape
        if self.x is not None:
            self.x = np.asarray(self.x, dtype=float)
            if self.x.ndim != 3 or self.x.shape[:2] != (M, T):
                raise ShapeError(f"x shape {self.x.shape} does not match y shape {self.y.shape}")
        self.z = np.asarray(self.z, dtype=float)
        if self.z.ndim != 4 or self.z.shape[:3] != (M, T, n_y):
            raise ShapeError(f"z shape {self.z.shape} does not match y shape {self.y.shape}")
        self.r = np.asarray(self.r, dtype=float)
        if self.r.shape != (M, T, n_y, l, m):
            raise ShapeError(f"r shape {self.r.shape} expected {(M, T, n_y, l, m)}")

    @classmethod
    def zeros(cls, M: int, n_points: int, n: int, d: int, rates: np.ndarray,
              n_y: int | None = None) -> "ThetaPath":
        rates = np.asarray(rates, dtype=float).reshape(np.shape(rates) if np.size(rates) else (0, 0))
        n_y = n if n_y is None else n_y
        l, m = rates.shape
        return cls(np.zeros((M, n_points, n)), np.zeros((M, n_points, n_y)),
                   np.zeros((M, n_points, n_y, d)), np.zeros((M, n_points, n_y, l, m)), rates)

    @property
    def M(self) -> int:
        return self.y.shape[0]

    @property
    def n_points(self) -> int:
        return self.y.shape[1]

    @property
    def d(self) -> int:
        return self.z.shape[3]

    def _parts(self):
        return (self.x, self.y, self.z, self.r)

    def _combine(self, other: "ThetaPath", a: float, b: float) -> "ThetaPath":
        parts = []
        for p, q in zip(self._parts(), other._parts()):
            if p is None and q is None:
                parts.append(None)
            elif p is None:
                parts.append(b * q)
            elif q is None:
                parts.append(a * p)
            else:
                parts.append(a * p + b * q)
        return ThetaPath(*parts, rates=self.rates)

    def __sub__(self, other: "ThetaPath") -> "ThetaPath":
        return self._combine(other, 1.0, -1.0)

    def __add__(self, other: "ThetaPath") -> "ThetaPath":
        return self._combine(other, 1.0, 1.0)

    def scaled(self, c: float) -> "ThetaPath":
        return ThetaPath(*(None if p is None else c * p for p in self._parts()), rates=self.rates)

    def blend(self, other: "ThetaPath", weight: float) -> "ThetaPath":
        """Return ``(1 - weight) * self + weight * other``."""
        return self._combine(other, 1.0 - weight, weight)

    def extended(self, n_points: int) -> "ThetaPath":
        """Pad with zeros in time up to ``n_points`` grid points."""
        extra = n_points - self.n_points
        if extra < 0:
            raise ShapeError("cannot shrink a path by extension")

        def pad(a):
            if a is None:
                return None
            width = [(0, 0)] * a.ndim
            width[1] = (0, extra)
            return np.pad(a, width)

        return ThetaPath(*(pad(p) for p in self._parts()), rates=self.rates)

    def point_sq(self) -> np.ndarray:
        """|theta(t_k)|^2 for every path and grid point, shape (M, N+1)."""
        out = _sq(self.y, 2) + _sq(self.z, 2) + jump_sq(self.r, self.rates, 2)
        if self.x is not None:
            out = out + _sq(self.x, 2)
        return np.broadcast_to(out, self.y.shape[:2]).astype(float)


def _check_grid(theta: ThetaPath, grid: TimeGrid):
    if theta.n_points != grid.n_steps + 1:
        raise ShapeError(f"path has {theta.n_points} grid points, grid expects {grid.n_steps + 1}")


def weighted_norm_sq_paths(theta: ThetaPath, K: float, grid: TimeGrid) -> np.ndarray:
    """Per-path left-endpoint sums of |theta(t_k)|^2 e^{K t_k} dt."""
    _check_grid(theta, grid)
    w = np.exp(K * grid.times[:-1]) * grid.dt
    return theta.point_sq()[:, :-1] @ w


def weighted_norm_sq(theta: ThetaPath, K: float, grid: TimeGrid) -> float:
    """Monte Carlo estimate of E int |theta(t)|^2 e^{Kt} dt on the grid (left-endpoint rule)."""
    return float(np.mean(weighted_norm_sq_paths(theta, K, grid)))


def weighted_distance(a: ThetaPath, b: ThetaPath, K: float, grid: TimeGrid) -> float:
    return float(np.sqrt(weighted_norm_sq(a - b, K, grid)))


@dataclass
class BsdeParams:
    """Constants of the backward equation: monotonicity rho, Lipschitz C0, C1, C2 and slack delta."""

    rho: float
    C0: float = 0.0
    C1: float = 0.0
    C2: float = 0.0
    K: float = 0.0
    delta: float = 0.0

    @property
    def gap(self) -> float:
        return self.K + 2 * self.rho - 2 * self.C1 ** 2 - 2 * self.C2 ** 2 - self.delta

    def validate(self):
        if not self.gap > 0:
            from .errors import AssumptionError
            raise AssumptionError(f"backward gap K+2rho-2C1^2-2C2^2-delta = {self.gap} is not positive")
        return self


@dataclass
class VerificationReport:
    """Outcome of a check. For inequality checks ``passed`` means lhs <= rhs + 3 SE."""

    name: str
    lhs: float
    rhs: float
    standard_error: float
    passed: bool
    detail: dict = field(default_factory=dict)

    @classmethod
    def inequality(cls, name: str, lhs: float, rhs: float, standard_error: float = 0.0,
                   detail: dict | None = None) -> "VerificationReport":
        lhs, rhs, se = float(lhs), float(rhs), float(standard_error)
        return cls(name, lhs, rhs, se, bool(lhs <= rhs + 3.0 * se), dict(detail or {}))

    def as_dict(self) -> dict:
        return {
            "name": self.name,
            "lhs": self.lhs,
            "rhs": self.rhs,
            "standard_error": self.standard_error,
            "passed": self.passed,
            "detail": self.detail,
        }


@dataclass
class CoefficientSet:
    """Coefficients (b, sigma, gamma, g, Phi) with declared constants.

    All callables act on one grid point for a batch of paths:
    ``b(t, x, y, z, r) -> (M, n)``, ``sigma -> (M, n, d)``, ``gamma -> (M, n, l, m)``,
    ``g -> (M, n_y)``; ``phi(y0) -> x0`` maps R^{n_y} to R^n. ``sigma`` and
    ``gamma`` may be ``None`` for zero. ``features`` optionally maps the forward
    state to the variables used for conditional-expectation regressions.
    """

    b: Callable
    sigma: Callable | None
    gamma: Callable | None
    g: Callable
    phi: Callable
    lipschitz_C: float
    monotone_mu: float
    weight_K: float
    n: int
    d: int = 0
    marks: MarkSpace = field(default_factory=MarkSpace.empty)
    n_y: int | None = None
    features: Callable | None = None
    name: str = ""

    def __post_init__(self):
        if self.n_y is None:
            self.n_y = self.n

    @property
    def rates(self) -> np.ndarray:
        return self.marks.intensities

    def eval_b(self, t, x, y, z, r):
        return np.asarray(self.b(t, x, y, z, r), dtype=float)

    def eval_sigma(self, t, x, y, z, r):
        if self.sigma is None:
            return np.zeros(x.shape + (self.d,))
        return np.asarray(self.sigma(t, x, y, z, r), dtype=float)

    def eval_gamma(self, t, x, y, z, r):
        if self.gamma is None:
            return np.zeros(x.shape + (self.marks.l, self.marks.m))
        return np.asarray(self.gamma(t, x, y, z, r), dtype=float)

    def eval_g(self, t, x, y, z, r):
        return np.asarray(self.g(t, x, y, z, r), dtype=float)

    def A(self, t, x, y, z, r):
        """The operator A(t, theta) = (-g, b, sigma, gamma) paired with (x, y, z, r)."""
        return (-self.eval_g(t, x, y, z, r), self.eval_b(t, x, y, z, r),
                self.eval_sigma(t, x, y, z, r), self.eval_gamma(t, x, y, z, r))

    def replace(self, **changes) -> "CoefficientSet":
        from dataclasses import replace
        return replace(self, **changes)


def theta_inner(a: Sequence[np.ndarray], b: Sequence[np.ndarray], rates: np.ndarray) -> np.ndarray:
    """Batch inner product of two quadruples with the pi-weighted jump part."""
    out = np.sum(a[0] * b[0], axis=1) + np.sum(a[1] * b[1], axis=1)
    if a[2].size:
        out = out + np.sum(a[2] * b[2], axis=(1, 2))
    if a[3].size:
        out = out + np.sum(a[3] * b[3] * rates, axis=(1, 2, 3))
    return out


def theta_sq(a: Sequence[np.ndarray], rates: np.ndarray) -> np.ndarray:
    return theta_inner(a, a, rates)


def estimate_monotonicity(coeffs: CoefficientSet, sampler: Callable, n_samples: int):
    """Empirical monotonicity and Lipschitz constants of A over sampled pairs.

    ``sampler(n_samples)`` returns ``(t, theta1, theta2)`` where each theta is a
    tuple ``(x, y, z, r)`` of batch arrays. Coincident pairs are skipped.
    Returns ``(mu_hat, C_hat)``.
    """
    if n_samples < 1:
        raise ValidationError("n_samples must be at least 1")
    t, th1, th2 = sampler(n_samples)
    th1 = tuple(np.asarray(a, dtype=float) for a in th1)
    th2 = tuple(np.asarray(a, dtype=float) for a in th2)
    dth = tuple(a - b for a, b in zip(th1, th2))
    A1 = coeffs.A(t, *th1)
    A2 = coeffs.A(t, *th2)
    dA = tuple(a - b for a, b in zip(A1, A2))
    rates = coeffs.rates
    nrm = theta_sq(dth, rates)
    keep = nrm > 0
    if not np.any(keep):
        raise ValidationError("all sampled pairs coincide; no monotonicity estimate possible")
    inner = theta_inner(dA, dth, rates)[keep]
    mu_hat = float(np.min(-inner / nrm[keep]))
    C_hat = float(np.max(np.sqrt(theta_sq(dA, rates)[keep] / nrm[keep])))
    return mu_hat, C_hat


def box_sampler(coeffs: CoefficientSet, half_width: float = 1.0, seed: int = 0, t: float = 0.0):
    """Uniform sampler of theta pairs in the box [-half_width, half_width].

    The returned callable carries the sampled box as ``.box`` so reports can
    state where the estimate applies.
    """
    rng = np.random.default_rng(seed)
    n, n_y, d = coeffs.n, coeffs.n_y, coeffs.d
    l, m = coeffs.marks.l, coeffs.marks.m

    def draw(S):
        return (rng.uniform(-half_width, half_width, (S, n)),
                rng.uniform(-half_width, half_width, (S, n_y)),
                rng.uniform(-half_width, half_width, (S, n_y, d)),
                rng.uniform(-half_width, half_width, (S, n_y, l, m)))

    def sampler(S):
        return t, draw(S), draw(S)

    sampler.box = {"half_width": float(half_width), "t": float(t)}
    return sampler


def check_gaps(coeffs: CoefficientSet, bsde: BsdeParams | None = None) -> list[VerificationReport]:
    """Arithmetic gap checks 2mu - K > 0 and, optionally, K + 2rho - 2C1^2 - 2C2^2 - delta > 0."""
    reports = []
    mu, K = coeffs.monotone_mu, coeffs.weight_K
    gap = 2 * mu - K
    reports.append(VerificationReport("coupled gap 2mu-K", lhs=K, rhs=2 * mu, standard_error=0.0,
                                      passed=bool(gap > 0), detail={"gap": gap, "strict": True}))
    if bsde is not None:
        bgap = bsde.gap
        reports.append(VerificationReport(
            "backward gap K+2rho-2C1^2-2C2^2-delta", lhs=bsde.delta,
            rhs=bsde.K + 2 * bsde.rho - 2 * bsde.C1 ** 2 - 2 * bsde.C2 ** 2, standard_error=0.0,
            passed=bool(bgap > 0), detail={"gap": bgap, "strict": True}))
    return reports


# ---------------------------------------------------------------------------
# LQ and game assumption checks. The specs are duck-typed; see lq.LQSpec and
# game.GameSpec for the attribute names.


def _value(obj, t):
    return np.asarray(obj(t) if callable(obj) else obj, dtype=float)


def _sample_times(spec, names, times):
    if times is not None:
        return np.asarray(times, dtype=float)
    def varies(v):
        if isinstance(v, tuple):
            return any(callable(e) for e in v)
        return callable(v)
    if any(varies(getattr(spec, nm, None)) for nm in names):
        return np.linspace(0.0, 10.0, 11)
    return np.array([0.0])


def _min_eig(a: np.ndarray) -> float:
    a = np.atleast_2d(a)
    return float(np.min(np.linalg.eigvalsh(0.5 * (a + a.T))))


def _max_eig(a: np.ndarray) -> float:
    a = np.atleast_2d(a)
    return float(np.max(np.linalg.eigvalsh(0.5 * (a + a.T))))


def _require_symmetric(name: str, a: np.ndarray):
    a = np.atleast_2d(a)
    scale = max(1.0, float(np.max(np.abs(a))))
    if a.shape[0] != a.shape[1] or np.max(np.abs(a - a.T)) > 1e-12 * scale:
        raise ValidationError(f"{name} must be symmetric")


def _mark_matrices(arr, rates):
    """Iterate (i, j, matrix) over the marks of a per-mark matrix array (l, m, n, n)."""
    arr = np.asarray(arr, dtype=float)
    l, m = rates.shape
    for i in range(l):
        for j in range(m):
            yield i, j, arr[i, j]


def _geq_report(name, mu, values):
    lo = min(values) if values else np.inf
    return VerificationReport(name, lhs=mu, rhs=lo, standard_error=0.0,
                              passed=bool(lo >= mu - 1e-12), detail={"min_eigenvalue": lo})


def check_lq_assumptions(spec, times=None) -> list[VerificationReport]:
    """Check the control problem's positivity conditions and the gap 2mu - K >= 0.

    Raises ``ValidationError`` when Q, L, M_i, S_ij or R is not symmetric.
    """
    ts = _sample_times(spec, ("A", "B", "C", "D", "L", "M", "S", "R"), times)
    rates = spec.marks.intensities
    drd, ls, ms, ss, rs, qs = [], [], [], [], [], []
    Q = _value(spec.Q, 0.0)
    _require_symmetric("Q", Q)
    for t in ts:
        R = _value(spec.R, t)
        _require_symmetric("R", R)
        rs.append(_min_eig(R))
        D = _value(spec.D, t)
        L = _value(spec.L, t)
        _require_symmetric("L", L)
        ls.append(_min_eig(L))
        for i, Mi in enumerate(_value(spec.M, t) if spec.d else []):
            _require_symmetric(f"M_{i + 1}", Mi)
            ms.append(_min_eig(Mi))
        for i, j, Sij in _mark_matrices(_value(spec.S, t), rates) if rates.size else []:
            _require_symmetric(f"S_{i + 1}(e_{j + 1})", Sij)
            ss.append(_min_eig(Sij))
        if rs[-1] > 0:
            drd.append(_min_eig(D @ np.linalg.solve(R, D.T)))
        else:
            drd.append(-np.inf)
    mu = spec.mu if spec.mu is not None else min(drd + ls + ms + ss)
    reports = [
        VerificationReport("R positive definite", lhs=0.0, rhs=min(rs), standard_error=0.0,
                           passed=bool(min(rs) > 0), detail={"min_eigenvalue": min(rs)}),
        VerificationReport("Q positive semi-definite", lhs=0.0, rhs=_min_eig(Q), standard_error=0.0,
                           passed=bool(_min_eig(Q) >= -1e-12), detail={"min_eigenvalue": _min_eig(Q)}),
        _geq_report("D R^-1 D^T >= mu I", mu, drd),
        _geq_report("L >= mu I", mu, ls),
    ]
    if ms:
        reports.append(_geq_report("M_i >= mu I", mu, ms))
    if ss:
        reports.append(_geq_report("S_i(e) >= mu I", mu, ss))
    gap = 2 * mu - spec.K
    reports.append(VerificationReport("gap 2mu-K >= 0", lhs=spec.K, rhs=2 * mu, standard_error=0.0,
                                      passed=bool(gap >= 0), detail={"gap": gap, "mu": mu}))
    return reports


def game_weight(D: np.ndarray, R: np.ndarray) -> np.ndarray:
    """D R^{-1} D^T."""
    D = np.atleast_2d(np.asarray(D, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    return D @ np.linalg.solve(R, D.T)


def commutation_residuals(spec, t: float = 0.0) -> dict:
    """Residual norms |P_i H - H P_i| for H in {A^T, B_j^T, C_j(e)^T} and the tolerance used."""
    P = [game_weight(_value(spec.D[i], t), _value(spec.R[i], t)) for i in range(2)]
    Hs = [("A^T", _value(spec.A, t).T)]
    if spec.d:
        Hs += [(f"B_{j + 1}^T", Bj.T) for j, Bj in enumerate(_value(spec.B, t))]
    rates = spec.marks.intensities
    if rates.size:
        Hs += [(f"C_{i + 1}(e_{j + 1})^T", Cij.T) for i, j, Cij in _mark_matrices(_value(spec.C, t), rates)]
    out = {}
    scale = 1.0
    for i, Pi in enumerate(P):
        for name, H in Hs:
            scale = max(scale, float(np.max(np.abs(Pi))) * max(1.0, float(np.max(np.abs(H)))))
            out[f"P_{i + 1} {name}"] = float(np.max(np.abs(Pi @ H - H @ Pi)))
    return {"residuals": out, "tolerance": 1e-10 * scale}


def check_game_assumptions(spec, times=None) -> list[VerificationReport]:
    """Reports for the reduction conditions, dissipativity, positivity and the gap."""
    ts = _sample_times(spec, ("A", "B", "C", "D", "L", "M", "S", "R"), times)
    rates = spec.marks.intensities
    n = spec.n
    P0 = [game_weight(_value(spec.D[i], 0.0), _value(spec.R[i], 0.0)) for i in range(2)]
    reports = []

    drift = 0.0
    for t in ts:
        for i in range(2):
            Pi = game_weight(_value(spec.D[i], t), _value(spec.R[i], t))
            drift = max(drift, float(np.max(np.abs(Pi - P0[i]))))
    reports.append(VerificationReport("D_i R_i^-1 D_i^T time-invariant", lhs=drift, rhs=0.0,
                                      standard_error=0.0, passed=bool(drift <= 1e-12),
                                      detail={"max_deviation": drift, "times": ts.tolist()}))

    worst, tol, detail = 0.0, 0.0, {}
    for t in ts:
        cr = commutation_residuals(spec, t)
        tol = max(tol, cr["tolerance"])
        for k, v in cr["residuals"].items():
            if v >= detail.get(k, -1.0):
                detail[k] = v
            worst = max(worst, v)
    reports.append(VerificationReport("commutation with A^T, B^T, C^T", lhs=worst, rhs=tol,
                                      standard_error=0.0, passed=bool(worst <= tol), detail=detail))

    top = -np.inf
    for t in ts:
        A = _value(spec.A, t)
        Mx = 2 * A + spec.K * np.eye(n)
        if spec.d:
            for Bj in _value(spec.B, t):
                Mx = Mx + Bj @ Bj.T
        if rates.size:
            for i, j, Cij in _mark_matrices(_value(spec.C, t), rates):
                Mx = Mx + Cij @ Cij.T * rates[i, j]
        top = max(top, _max_eig(Mx))
    reports.append(VerificationReport("dissipativity 2A+BB^T+CC^T pi+KI <= -delta I", lhs=top, rhs=0.0,
                                      standard_error=0.0, passed=bool(top < 0),
                                      detail={"delta_margin": -top}))

    Qc = sum(P0[i] @ _value(spec.Q[i], 0.0) for i in range(2))
    q_eig = _min_eig(Qc)
    reports.append(VerificationReport("sum P_i Q_i positive semi-definite", lhs=0.0, rhs=q_eig,
                                      standard_error=0.0, passed=bool(q_eig >= -1e-12),
                                      detail={"min_eigenvalue": q_eig}))

    combos = []
    single = []
    for t in ts:
        P = [game_weight(_value(spec.D[i], t), _value(spec.R[i], t)) for i in range(2)]
        combos.append(_min_eig(sum(P[i] @ _value(spec.L[i], t) for i in range(2))))
        single += [_min_eig(P[i]) for i in range(2)] + [_min_eig(_value(spec.L[i], t)) for i in range(2)]
        for j in range(spec.d):
            combos.append(_min_eig(sum(P[i] @ _value(spec.M[i], t)[j] for i in range(2))))
            single += [_min_eig(_value(spec.M[i], t)[j]) for i in range(2)]
        if rates.size:
            S = [_value(spec.S[i], t) for i in range(2)]
            for a in range(rates.shape[0]):
                for b in range(rates.shape[1]):
                    combos.append(_min_eig(P[0] @ S[0][a, b] + P[1] @ S[1][a, b]))
                    single += [_min_eig(S[0][a, b]), _min_eig(S[1][a, b])]
    mu = spec.mu if spec.mu is not None else min(combos)
    reports.append(_geq_report("sum P_i H_i >= mu I", mu, combos))
    gap = 2 * min(mu, 1.0) - spec.K
    reports.append(VerificationReport("gap 2min(mu,1)-K >= 0", lhs=spec.K, rhs=2 * min(mu, 1.0),
                                      standard_error=0.0, passed=bool(gap >= 0), detail={"gap": gap, "mu": mu}))
    uniq = min(single) if single else np.inf
    reports.append(VerificationReport("uniqueness: P_i, L_i, M_ij, S_ij >= mu I", lhs=mu, rhs=uniq,
                                      standard_error=0.0, passed=bool(uniq >= mu - 1e-12),
                                      detail={"min_eigenvalue": uniq}))
    return reports
