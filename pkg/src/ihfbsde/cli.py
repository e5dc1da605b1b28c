"""Batch entry point: ``ihfbsde run CONFIG`` and ``ihfbsde report RUN_DIR``.

A run writes ``manifest.json`` (config echo, code version, seed, status),
``report.json`` (checks and results), CSV time series and, on
non-convergence, ``trace.json``. JSON is written with sorted keys and CSV
with a header row, so identical configs give byte-identical files.

Exit codes: 0 all requested checks pass, 1 some check fails, 2 config or
schema error (or a missing manifest for ``report``), 3 a solver did not
converge.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import logging
import math
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
import yaml

from . import FORMAT_TAG, __version__
from .bsde import BsdeDriver, decay_diagnostic, decays, deterministic_oracle, solve_infinite
from .errors import AssumptionError, IhfbsdeError, NonConvergenceError, ShapeError, ValidationError
from .expr import coefficient
from .fbsde import (
    Inhomogeneity,
    PicardConfig,
    comparison_check,
    solve_alpha0,
    solve_continuation,
    solve_picard,
    stability_scaling,
)
from .model import (
    BsdeParams,
    CoefficientSet,
    MarkSpace,
    TimeGrid,
    VerificationReport,
    box_sampler,
    check_gaps,
    estimate_monotonicity,
    jump_sq,
)
from .noise import NoiseSpec, generate, prefix_factory

log = logging.getLogger("ihfbsde")

EXIT_OK, EXIT_FAILED, EXIT_CONFIG, EXIT_NONCONVERGENCE = 0, 1, 2, 3


class ConfigError(IhfbsdeError):
    """Config cannot be read or violates the schema; ``diagnostics`` lists each problem."""

    def __init__(self, diagnostics: list[str]):
        super().__init__("; ".join(diagnostics))
        self.diagnostics = diagnostics


@dataclass
class RunResult:
    checks: list = field(default_factory=list)
    info: list = field(default_factory=list)
    results: dict = field(default_factory=dict)
    series: dict = field(default_factory=dict)
    trace: list | None = None

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)


# ---------------------------------------------------------------------------
# config loading


def _schema() -> dict:
    text = resources.files("ihfbsde").joinpath("schema/config.schema.json").read_text(encoding="utf-8")
    return json.loads(text)


def _node_line(root, path) -> int | None:
    node = root
    line = node.start_mark.line + 1 if node is not None else None
    for key in path:
        if isinstance(node, yaml.MappingNode):
            nxt = None
            for k, v in node.value:
                if k.value == key:
                    nxt = v
                    break
        elif isinstance(node, yaml.SequenceNode) and isinstance(key, int) and key < len(node.value):
            nxt = node.value[key]
        else:
            nxt = None
        if nxt is None:
            break
        node = nxt
        line = node.start_mark.line + 1
    return line


def _validate(cfg: dict, root=None, where: str = "") -> None:
    validator = jsonschema.Draft202012Validator(_schema())
    errors = sorted(validator.iter_errors(cfg), key=lambda e: (list(map(str, e.absolute_path)), e.message))
    if errors:
        diags = []
        for e in errors:
            path = list(e.absolute_path)
            field_name = "/".join(map(str, path)) or "<root>"
            line = _node_line(root, path) if root is not None else None
            loc = f"line {line}, " if line is not None else ""
            diags.append(f"{where}{loc}field {field_name}: {e.message}")
        raise ConfigError(diags)


def load_config(path: str | Path) -> dict:
    """Read and validate a YAML (or JSON) config."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError([f"cannot read {path}: {exc.strerror}"]) from None
    try:
        root = yaml.compose(text)
        cfg = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        loc = f"line {mark.line + 1}: " if mark is not None else ""
        raise ConfigError([f"{loc}{getattr(exc, 'problem', None) or exc}"]) from None
    if not isinstance(cfg, dict):
        raise ConfigError(["config must be a mapping"])
    _validate(cfg, root)
    if cfg["kind"] == "verify-suite":
        for s in cfg["seeds"]:
            _validate(_suite_member(cfg, s), _node_line_root(root, "base"), where="base: ")
    return cfg


def _node_line_root(root, key):
    if isinstance(root, yaml.MappingNode):
        for k, v in root.value:
            if k.value == key:
                return v
    return None


def _suite_member(cfg: dict, seed: int) -> dict:
    member = copy.deepcopy(cfg["base"])
    member["seed"] = int(seed)
    if member.get("kind") == "verify-suite":
        raise ConfigError(["base: a suite cannot contain another suite"])
    return member


# ---------------------------------------------------------------------------
# shared builders


def _grid(cfg) -> TimeGrid:
    g = cfg["grid"]
    return TimeGrid(float(g["t_max"]), int(g["n_steps"]))


def _marks(cfg) -> MarkSpace:
    rates = cfg.get("noise", {}).get("intensities") or []
    if rates and len({len(r) for r in rates}) != 1:
        raise ValidationError("noise/intensities must be rectangular")
    return MarkSpace(np.array(rates, dtype=float)) if rates else MarkSpace.empty()


def _noise(cfg, grid: TimeGrid):
    nz = cfg.get("noise", {})
    spec = NoiseSpec(int(nz.get("d", 0)), _marks(cfg), int(nz.get("paths", 1)), grid, int(cfg["seed"]))
    return generate(spec)


def _picard(cfg, **defaults) -> PicardConfig:
    s = dict(defaults)
    s.update({k: v for k, v in cfg.get("solver", {}).items() if k in ("tol", "max_iter", "damping", "sweep")})
    return PicardConfig(**s)


def _coef(value, shape, name):
    return coefficient(value, shape, name)


def _moments(name: str, a: np.ndarray) -> dict:
    """Per-time mean (and std across paths when paths differ) of each coordinate."""
    a = a.reshape(a.shape[0], a.shape[1], -1)
    out = {}
    for j in range(a.shape[2]):
        out[f"mean_{name}{j + 1}"] = a[:, :, j].mean(axis=0)
        out[f"std_{name}{j + 1}"] = a[:, :, j].std(axis=0)
    return out


def _theta_series(theta, grid: TimeGrid) -> dict:
    cols = {"t": grid.times}
    if theta.x is not None:
        cols.update(_moments("x", theta.x))
    cols.update(_moments("y", theta.y))
    cols["mean_sq_z"] = np.broadcast_to(np.sum(theta.z ** 2, axis=(2, 3)), theta.y.shape[:2]).mean(axis=0)
    cols["mean_sq_r"] = np.broadcast_to(jump_sq(theta.r, theta.rates, 2), theta.y.shape[:2]).mean(axis=0)
    return cols


# ---------------------------------------------------------------------------
# kinds


def _lq_spec(p: dict, marks: MarkSpace, d: int):
    from .lq import LQSpec
    n, k = int(p["n"]), int(p["k"])
    l, m = marks.l, marks.m
    return LQSpec(n=n, k=k, A=_coef(p["A"], (n, n), "A"), D=_coef(p["D"], (n, k), "D"),
                  Q=_coef(p["Q"], (n, n), "Q"), L=_coef(p["L"], (n, n), "L"), R=_coef(p["R"], (k, k), "R"),
                  K=float(p["K"]), d=d, marks=marks, B=_coef(p.get("B"), (d, n, n), "B"),
                  C=_coef(p.get("C"), (l, m, n, n), "C"), M=_coef(p.get("M"), (d, n, n), "M"),
                  S=_coef(p.get("S"), (l, m, n, n), "S"), alpha=_coef(p.get("alpha"), (n,), "alpha"),
                  mu=p.get("mu"))


def run_soc(cfg: dict) -> RunResult:
    from .lq import duality_residual, evaluate_cost, optimality_test, perturbation_directions, solve_soc
    grid = _grid(cfg)
    noise = _noise(cfg, grid)
    spec = _lq_spec(cfg["problem"], noise.spec.mark_space, noise.d)
    checks = cfg.get("checks", {})
    method = cfg.get("solver", {}).get("method", "picard")
    sol = solve_soc(spec, grid, noise, solver=method, config=_picard(cfg, tol=1e-9, max_iter=400))
    res = RunResult(checks=list(sol.reports), trace=sol.trace)
    J0, J0_se = evaluate_cost(spec, None, grid, noise)
    gain = spec.gain(0.0)
    res.results.update({
        "control_law": {"form": "u(t) = G(t) x(t)", "G_at_0": gain, "time_dependent": spec.time_dependent},
        "J": sol.J_estimate, "J_se": sol.J_se, "J_zero_control": J0, "J_zero_control_se": J0_se,
        "x0": sol.theta.x[:, 0].mean(axis=0), "y0": sol.theta.y[:, 0].mean(axis=0),
        "picard_sweeps": len(sol.trace),
    })
    n_dual = int(checks.get("duality", 20))
    if n_dual:
        table = []
        for idx, w in enumerate(perturbation_directions(noise, grid, spec.k, n_dual, seed=int(cfg["seed"]))):
            r = duality_residual(sol, np.broadcast_to(sol.u, np.broadcast_shapes(sol.u.shape, w.shape)) + w,
                                 spec, grid, noise)
            r["direction"] = idx
            table.append(r)
        worst = max(table, key=lambda r: abs(r["lambda_hat"]) - 3 * r["se"])
        res.checks.append(VerificationReport("duality |Lambda_hat| <= 3 SE", lhs=abs(worst["lambda_hat"]),
                                             rhs=3 * worst["se"], standard_error=worst["se"],
                                             passed=all(r["passed"] for r in table),
                                             detail={"directions": n_dual}))
        res.results["lambda_table"] = table
    n_opt = int(checks.get("optimality", 50))
    if n_opt:
        rep = optimality_test(sol, spec, grid, noise, n_perturbations=n_opt,
                              eps_grid=tuple(checks.get("eps", (0.1, 0.2, 0.4))), seed=int(cfg["seed"]))
        res.checks.append(rep)
    u_cols = _moments("u", np.asarray(sol.u))
    cols = {"t": grid.times, **u_cols, **{k: v for k, v in _theta_series(sol.theta, grid).items() if k != "t"}}
    res.series["soc_series.csv"] = cols
    return res


def _game_spec(p: dict, marks: MarkSpace, d: int):
    from .game import GameSpec
    n = int(p["n"])
    k = tuple(int(v) for v in p["k"])
    l, m = marks.l, marks.m
    pl = p["players"]

    def per(name, shape_fn, optional=False):
        return tuple(_coef(pl[i].get(name) if optional else pl[i][name], shape_fn(i), f"players/{i}/{name}")
                     for i in range(2))

    return GameSpec(n=n, k=k, A=_coef(p["A"], (n, n), "A"), D=per("D", lambda i: (n, k[i])),
                    Q=per("Q", lambda i: (n, n)), L=per("L", lambda i: (n, n)), R=per("R", lambda i: (k[i], k[i])),
                    K=float(p["K"]), d=d, marks=marks, B=_coef(p.get("B"), (d, n, n), "B"),
                    C=_coef(p.get("C"), (l, m, n, n), "C"), M=per("M", lambda i: (d, n, n), True),
                    S=per("S", lambda i: (l, m, n, n), True), alpha=_coef(p.get("alpha"), (n,), "alpha"),
                    mu=p.get("mu"))


def run_game(cfg: dict) -> RunResult:
    from .game import UNIQUENESS, deviation_test, solve_nash, transform_agreement
    grid = _grid(cfg)
    noise = _noise(cfg, grid)
    spec = _game_spec(cfg["problem"], noise.spec.mark_space, noise.d)
    checks = cfg.get("checks", {})
    config = _picard(cfg, tol=1e-9, max_iter=400)
    sol = solve_nash(spec, grid, noise, config=config)
    res = RunResult(trace=sol.trace)
    for r in sol.reports:
        (res.info if r.name == UNIQUENESS else res.checks).append(r)
    rec = sol.reconstruction
    res.checks.append(VerificationReport("reconstruction P1 x1 + P2 x2 = xbar", lhs=rec["residual"],
                                         rhs=rec["tolerance"], standard_error=rec["se"], passed=rec["passed"],
                                         detail=rec))
    res.results.update({
        "J1": sol.J1, "J1_se": sol.J1_se, "J2": sol.J2, "J2_se": sol.J2_se,
        "control_law": {"form": "u_i(t) = G_i(t) x_i(t)", "G1_at_0": spec.gain(0, 0.0),
                        "G2_at_0": spec.gain(1, 0.0)},
        "u_moments": {f"u{i + 1}": {"mean_at_0": u[:, 0].mean(axis=0), "std_at_0": u[:, 0].std(axis=0),
                                    "time_mean": u[:, :-1].mean(axis=(0, 1))}
                      for i, u in enumerate((sol.u1, sol.u2))},
        "y0": sol.theta.y[:, 0].mean(axis=0), "picard_sweeps": len(sol.trace),
    })
    if checks.get("direct", True):
        direct = solve_nash(spec, grid, noise, route="direct", config=config)
        res.checks.append(transform_agreement(sol, direct, spec, grid, 3 * 2 * config.tol))
    n_dev = int(checks.get("deviations", 50))
    if n_dev:
        tables = {}
        for player in (1, 2):
            rep = deviation_test(sol, spec, player, grid, noise, n_deviations=n_dev,
                                 eps_grid=tuple(checks.get("eps", (0.1, 0.2, 0.4))), seed=int(cfg["seed"]))
            tables[f"player{player}"] = rep.detail.pop("rows")
            res.checks.append(rep)
        res.results["deviation_tables"] = tables
    cols = {"t": grid.times, **_moments("u1_", sol.u1), **_moments("u2_", sol.u2), **_moments("x1_", sol.x1),
            **_moments("x2_", sol.x2), **_moments("y", sol.theta.y)}
    res.series["game_series.csv"] = cols
    return res


def run_bsde(cfg: dict) -> RunResult:
    p = cfg["problem"]
    m = int(p["m"])
    nz = cfg.get("noise", {})
    d = int(nz.get("d", 0))
    marks = _marks(cfg)
    rates = marks.intensities
    drv = p["driver"]
    rho = float(drv["rho"])
    cz, cr = float(drv.get("z", 0.0)), float(drv.get("r", 0.0))
    clip = float(drv.get("clip", 1.0))
    cubic = drv["type"] == "cubic"

    def G(t, y, z, r):
        out = -rho * y
        if cubic:
            out = out - np.clip(y, -clip, clip) ** 3
        if d and cz:
            out = out + cz * z.sum(axis=2) / math.sqrt(d)
        if rates.size and cr:
            out = out + cr * np.einsum("pmij,ij->pm", r, rates) / math.sqrt(max(rates.sum(), 1e-300))
        return out

    C1 = abs(cz)
    C2 = abs(cr)
    K = float(p["K"])
    params = BsdeParams(rho=rho, C0=rho + (3 * clip ** 2 if cubic else 0.0) + C1 + C2, C1=C1, C2=C2, K=K,
                        delta=float(p.get("delta", 0.0)))
    phi = _coef(p.get("phi"), (m,), "phi")
    driver = BsdeDriver(G, phi if callable(phi) else (lambda t, v=phi: v), params, m=m)
    dt = float(p.get("dt", 0.01))
    schedule = p.get("horizons")
    res = RunResult(checks=[VerificationReport("backward gap K+2rho-2C1^2-2C2^2-delta", lhs=params.delta,
                                               rhs=K + 2 * rho - 2 * C1 ** 2 - 2 * C2 ** 2, standard_error=0.0,
                                               passed=bool(params.gap > 0), detail={"gap": params.gap})])
    if not params.gap > 0:
        raise AssumptionError(f"backward gap {params.gap} is not positive")
    if schedule is None:
        from .bsde import default_schedule
        schedule = default_schedule(params, dt)
    longest = TimeGrid.from_dt(max(schedule), dt)
    factory = prefix_factory(NoiseSpec(d, marks, int(nz.get("paths", 1)), longest, int(cfg["seed"])))
    sol = solve_infinite(driver, schedule, tol=float(p.get("tol", 1e-3)), dt=dt, noise_factory=factory)
    grid = sol.grid
    series = decay_diagnostic(sol.y, K, grid)
    if cfg.get("checks", {}).get("decay", True):
        n = max(1, len(series) // 10)
        res.checks.append(VerificationReport("weighted second moment decays", lhs=float(np.mean(series[-n:])),
                                             rhs=float(np.mean(series[:n])), standard_error=0.0,
                                             passed=decays(series), detail={}))
    res.results.update({"y0": sol.y0, "y0_se": sol.y0_se, "truncation_history": sol.truncation_history,
                        "t_max": grid.t_max, "mode": sol.mode})
    shape = sol.y.shape[:2]
    res.series["bsde_series.csv"] = {
        "t": grid.times,
        "mean_sq_y": np.broadcast_to(np.sum(sol.y ** 2, axis=2), shape).mean(axis=0),
        "mean_sq_z": np.broadcast_to(np.sum(sol.z ** 2, axis=(2, 3)), shape).mean(axis=0),
        "mean_sq_r": np.broadcast_to(jump_sq(sol.r, sol.rates, 2), shape).mean(axis=0),
        "weighted_sq_y": series,
    }
    return res


def _phi_map(p: dict, n: int):
    spec = p.get("phi_map", {}) or {}
    Q = np.asarray(_coef(spec.get("Q"), (n, n), "phi_map/Q"), dtype=float)
    if callable(Q):
        raise ValidationError("phi_map/Q must be constant")
    cubic = float(spec.get("cubic", 0.0))

    def phi(y):
        y = np.asarray(y, dtype=float)
        return -(Q @ y) - cubic * y ** 3
    return phi, float(np.linalg.norm(Q, 2)) + 3 * cubic


def run_fbsde_base(cfg: dict) -> RunResult:
    p = cfg["problem"]
    grid = _grid(cfg)
    noise = _noise(cfg, grid)
    n, mu = int(p["n"]), float(p["mu"])
    l, m = noise.spec.mark_space.l, noise.spec.mark_space.m
    parts = {nm: _coef(p.get(nm), shape, nm) for nm, shape in
             (("eta", (n,)), ("phi", (n,)), ("psi", (n, noise.d)), ("xi", (n, l, m)))}

    def fn(v):
        return v if callable(v) else (lambda t, a=v: a)
    phi_map, lip = _phi_map(p, n)
    inh = Inhomogeneity(**{k: fn(v) for k, v in parts.items()})
    theta = solve_alpha0(mu, phi_map, inh, grid, noise, n=n, lipschitz_C=lip)
    x0 = theta.x[0, 0]
    y0 = theta.y[:, 0].mean(axis=0)
    coupling = float(np.linalg.norm(x0 - phi_map(y0)))
    res = RunResult()
    res.checks.append(VerificationReport("initial coupling |x(0) - Phi(y(0))|", lhs=coupling, rhs=1e-10,
                                         standard_error=0.0, passed=bool(coupling <= 1e-10), detail={}))
    p_or, _, _ = deterministic_oracle(mu, (fn(parts["phi"]), None, None, fn(parts["eta"])), grid)
    p_num = (theta.y - theta.x).mean(axis=0)
    scale = float(np.max(np.abs(p_or)))
    rel = float(np.max(np.abs(p_num - p_or)) / scale) if scale > 0 else float(np.max(np.abs(p_num)))
    tol = float(cfg.get("checks", {}).get("oracle_rel_tol", 0.02))
    res.checks.append(VerificationReport("closed-form p = y - x relative error", lhs=rel, rhs=tol,
                                         standard_error=0.0, passed=bool(rel <= tol), detail={}))
    res.results.update({"x0": x0, "y0": y0, "p0_oracle": p_or[0], "p0_numeric": p_num[0]})
    res.series["fbsde_base_series.csv"] = _theta_series(theta, grid)
    return res


def _linear_coefficients(cfg: dict, noise) -> CoefficientSet:
    p = cfg["problem"]
    n, d = int(p["n"]), noise.d
    marks = noise.spec.mark_space
    l, m = marks.l, marks.m
    rates = marks.intensities
    bs, ss, gs, ga = p["b"], p.get("sigma", {}) or {}, p["g"], p.get("gamma", {}) or {}
    c = {
        "bx": _coef(bs.get("x"), (n, n), "b/x"), "by": _coef(bs.get("y"), (n, n), "b/y"),
        "b0": _coef(bs.get("const"), (n,), "b/const"),
        "sx": _coef(ss.get("x"), (d, n, n), "sigma/x"), "sz": _coef(ss.get("z"), (d, n, n), "sigma/z"),
        "s0": _coef(ss.get("const"), (n, d), "sigma/const"),
        "cx": _coef(ga.get("x"), (l, m, n, n), "gamma/x"), "cr": _coef(ga.get("r"), (l, m, n, n), "gamma/r"),
        "c0": _coef(ga.get("const"), (n, l, m), "gamma/const"),
        "gx": _coef(gs.get("x"), (n, n), "g/x"), "gy": _coef(gs.get("y"), (n, n), "g/y"),
        "gz": _coef(gs.get("z"), (d, n, n), "g/z"), "gr": _coef(gs.get("r"), (l, m, n, n), "g/r"),
        "g0": _coef(gs.get("const"), (n,), "g/const"),
    }

    def at(name, t):
        v = c[name]
        return v(t) if callable(v) else v

    def b(t, x, y, z, r):
        return x @ at("bx", t).T + y @ at("by", t).T + at("b0", t)

    def sigma(t, x, y, z, r):
        sx, sz = at("sx", t), at("sz", t)
        out = np.empty(x.shape + (d,))
        for j in range(d):
            out[:, :, j] = x @ sx[j].T + z[:, :, j] @ sz[j].T
        return out + at("s0", t)

    def gamma(t, x, y, z, r):
        cx, cr = at("cx", t), at("cr", t)
        out = np.empty(x.shape + (l, m))
        for a in range(l):
            for e in range(m):
                out[:, :, a, e] = x @ cx[a, e].T + r[:, :, a, e] @ cr[a, e].T
        return out + at("c0", t)

    def g(t, x, y, z, r):
        gz, gr = at("gz", t), at("gr", t)
        out = x @ at("gx", t).T + y @ at("gy", t).T + at("g0", t)
        for j in range(d):
            out = out + z[:, :, j] @ gz[j].T
        for a in range(l):
            for e in range(m):
                out = out + rates[a, e] * (r[:, :, a, e] @ gr[a, e].T)
        return out

    phi, _ = _phi_map(p, n)
    coeffs = CoefficientSet(b, sigma if d else None, gamma if l * m else None, g, phi, lipschitz_C=1.0,
                            monotone_mu=float(p["mu"]), weight_K=float(p["K"]), n=n, d=d, marks=marks,
                            name=cfg.get("name", "fbsde"))
    # The affine parts cancel in differences, so the sampled constants are those of the linear map.
    n_samples = int(cfg.get("checks", {}).get("monotonicity_samples", 4096))
    mu_hat, C_hat = estimate_monotonicity(coeffs, box_sampler(coeffs, 1.0, seed=int(cfg["seed"])), n_samples)
    coeffs = coeffs.replace(lipschitz_C=max(C_hat, coeffs.monotone_mu))
    coeffs._estimates = (mu_hat, C_hat)
    return coeffs


def run_fbsde(cfg: dict) -> RunResult:
    grid = _grid(cfg)
    noise = _noise(cfg, grid)
    coeffs = _linear_coefficients(cfg, noise)
    mu_hat, C_hat = coeffs._estimates
    mu = coeffs.monotone_mu
    res = RunResult(checks=check_gaps(coeffs))
    res.checks.append(VerificationReport("declared mu <= sampled monotonicity", lhs=mu, rhs=mu_hat,
                                         standard_error=0.0, passed=bool(mu <= mu_hat + 1e-9 * max(1.0, mu)),
                                         detail={"C_hat": C_hat}))
    solver = cfg.get("solver", {})
    config = _picard(cfg, tol=1e-8, max_iter=400)
    if solver.get("method", "picard") == "continuation":
        theta, state = solve_continuation(coeffs, grid, noise, max_levels=int(solver.get("max_levels", 3)),
                                          inner_tol=config.tol)
        res.trace = [{"alpha": a, "iterations": it, "ratio": r} for a, it, r in state.level_trace]
    else:
        theta, res.trace = solve_picard(coeffs, grid, noise, config)
    res.results.update({"x0": theta.x[:, 0].mean(axis=0), "y0": theta.y[:, 0].mean(axis=0),
                        "iterations": len(res.trace)})
    checks = cfg.get("checks", {})
    if "comparison" in checks:
        if coeffs.n != 1:
            raise ValidationError("checks/comparison needs n = 1")
        shift = float(checks["comparison"]["shift"])
        phi = coeffs.phi
        cmp_cfg = PicardConfig(tol=min(config.tol, 1e-9), max_iter=max(config.max_iter, 400), sweep="splitting",
                               damping=1.0)
        out = comparison_check(coeffs, lambda y: phi(y) + shift, phi, grid, noise, cmp_cfg)
        res.results["comparison"] = {k: out[k] for k in ("y_hat0", "y_hat0_se", "tau_hat", "case", "verdict",
                                                         "phi_gap", "series_nonnegative")}
        res.checks.append(VerificationReport(f"comparison verdict (case {out['case']})", lhs=out["y_hat0"][0],
                                             rhs=3 * out["y_hat0_se"][0], standard_error=out["y_hat0_se"][0],
                                             passed=bool(out["verdict"]), detail={"tau_hat": out["tau_hat"]}))
        res.checks.append(VerificationReport("averaged <x^, y^> series >= -3 SE", lhs=0.0, rhs=0.0,
                                             standard_error=0.0, passed=bool(out["series_nonnegative"]),
                                             detail={}))
        res.series["comparison_series.csv"] = {"t": grid.times, "inner": np.asarray(out["inner_product_series"]),
                                               "inner_se": np.asarray(out["inner_product_se"])}
    if "stability" in checks:
        st = checks["stability"]
        direction = np.asarray(_coef(st.get("direction", [1.0] * coeffs.n), (coeffs.n,), "stability/direction"))
        rep = stability_scaling(coeffs, direction, float(st["h"]), grid, noise, strong_nu=st.get("nu"))
        res.checks.append(rep)
    res.series["fbsde_series.csv"] = _theta_series(theta, grid)
    return res


RUNNERS = {"soc": run_soc, "game": run_game, "bsde": run_bsde, "fbsde-base": run_fbsde_base, "fbsde": run_fbsde}


# ---------------------------------------------------------------------------
# output


def _clean(obj):
    """JSON-safe copy: arrays to lists, numpy scalars to Python, non-finite floats to None."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if obj is None or isinstance(obj, str):
        return obj
    return str(obj)


def _dump_json(path: Path, data) -> None:
    text = json.dumps(_clean(data), sort_keys=True, indent=2, allow_nan=False)
    path.write_text(text + "\n", encoding="utf-8")


def _write_csv(path: Path, cols: dict) -> None:
    names = list(cols)
    arrays = [np.asarray(cols[k], dtype=float).reshape(-1) for k in names]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(names)
    for row in zip(*arrays):
        w.writerow([repr(float(v)) for v in row])
    path.write_text(buf.getvalue(), encoding="utf-8")


def code_version() -> dict:
    """Package version and a digest of the package sources."""
    h = hashlib.sha256()
    pkg = resources.files("ihfbsde")
    files = sorted([p for p in pkg.iterdir() if p.name.endswith(".py")], key=lambda p: p.name)
    files.append(pkg.joinpath("schema/config.schema.json"))
    for p in files:
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return {"version": __version__, "source_sha256": h.hexdigest()}


def _echo(cfg: dict) -> dict:
    return {k: v for k, v in cfg.items() if k != "output"}


def _write_run(out: Path, cfg: dict, res: RunResult | None, exit_code: int, error: str | None = None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    if res is not None:
        for name, cols in res.series.items():
            _write_csv(out / name, cols)
            files[name] = {"type": "csv", "format": FORMAT_TAG, "columns": list(cols)}
        report = {"format": FORMAT_TAG, "kind": cfg["kind"], "seed": cfg["seed"], "all_passed": res.passed,
                  "checks": [c.as_dict() for c in res.checks], "info": [c.as_dict() for c in res.info],
                  "results": res.results}
        _dump_json(out / "report.json", report)
        files["report.json"] = {"type": "json", "format": FORMAT_TAG}
        if res.trace is not None:
            _dump_json(out / "trace.json", {"format": FORMAT_TAG, "trace": res.trace})
            files["trace.json"] = {"type": "json", "format": FORMAT_TAG}
    manifest = {"format": FORMAT_TAG, "kind": cfg["kind"], "seed": cfg["seed"], "config": _echo(cfg),
                "code": code_version(), "files": files, "exit_code": exit_code, "error": error}
    _dump_json(out / "manifest.json", manifest)


def _execute(cfg: dict, out: Path) -> int:
    kind = cfg["kind"]
    if kind == "verify-suite":
        return _execute_suite(cfg, out)
    try:
        res = RUNNERS[kind](cfg)
    except NonConvergenceError as exc:
        log.error("solver did not converge: %s", exc)
        out.mkdir(parents=True, exist_ok=True)
        _dump_json(out / "trace.json", {"format": FORMAT_TAG, "error": str(exc), "trace": exc.trace})
        _write_run(out, cfg, None, EXIT_NONCONVERGENCE, str(exc))
        m = json.loads((out / "manifest.json").read_text())
        m["files"]["trace.json"] = {"type": "json", "format": FORMAT_TAG}
        _dump_json(out / "manifest.json", m)
        return EXIT_NONCONVERGENCE
    except AssumptionError as exc:
        log.error("assumption check failed: %s", exc)
        _write_run(out, cfg, None, EXIT_FAILED, str(exc))
        return EXIT_FAILED
    except (ValidationError, ShapeError) as exc:
        raise ConfigError([str(exc)]) from None
    code = EXIT_OK if res.passed else EXIT_FAILED
    _write_run(out, cfg, res, code)
    for c in res.checks:
        log.info("%s %s", "PASS" if c.passed else "FAIL", c.name)
    return code


def _execute_suite(cfg: dict, out: Path) -> int:
    out.mkdir(parents=True, exist_ok=True)
    members = []
    worst = EXIT_OK
    for s in cfg["seeds"]:
        member = _suite_member(cfg, s)
        sub = out / f"seed-{s}"
        code = _execute(member, sub)
        worst = max(worst, code)
        members.append({"seed": s, "directory": sub.name, "exit_code": code})
    summary = {"format": FORMAT_TAG, "kind": "verify-suite", "seed": cfg["seed"], "members": members,
               "all_passed": all(m["exit_code"] == EXIT_OK for m in members)}
    _dump_json(out / "report.json", summary)
    manifest = {"format": FORMAT_TAG, "kind": "verify-suite", "seed": cfg["seed"], "config": _echo(cfg),
                "code": code_version(), "files": {"report.json": {"type": "json", "format": FORMAT_TAG}},
                "exit_code": worst, "error": None}
    _dump_json(out / "manifest.json", manifest)
    return worst


def run(config_path: str | Path, output: str | Path | None = None, seed: int | None = None) -> int:
    """Run a config; returns the exit code."""
    try:
        cfg = load_config(config_path)
        if seed is not None:
            cfg["seed"] = int(seed)
            _validate(cfg)
        out = Path(output or cfg.get("output") or Path("runs") / Path(config_path).stem)
        return _execute(cfg, out)
    except ConfigError as exc:
        for d in exc.diagnostics:
            print(f"config error: {d}", file=sys.stderr)
        return EXIT_CONFIG


# ---------------------------------------------------------------------------
# report


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.4g}"
    return str(v)


def _print_checks(report: dict, stream) -> None:
    rows = [("check", "status", "lhs", "rhs", "SE")]
    for c in report.get("checks", []):
        rows.append((c["name"], "pass" if c["passed"] else "FAIL", _fmt(c["lhs"]), _fmt(c["rhs"]),
                     _fmt(c["standard_error"])))
    for c in report.get("info", []):
        rows.append((c["name"] + " (info)", "holds" if c["passed"] else "fails", _fmt(c["lhs"]), _fmt(c["rhs"]),
                     _fmt(c["standard_error"])))
    widths = [max(len(r[i]) for r in rows) for i in range(5)]
    for r in rows:
        print("  ".join(s.ljust(w) for s, w in zip(r, widths)).rstrip(), file=stream)


def _print_highlights(report: dict, stream) -> None:
    res = report.get("results", {})
    kind = report.get("kind")
    if kind == "soc":
        print(f"J(u) = {_fmt(res.get('J'))} +- {_fmt(res.get('J_se'))}   "
              f"J(0) = {_fmt(res.get('J_zero_control'))}", file=stream)
        table = res.get("lambda_table") or []
        if table:
            worst = max(table, key=lambda r: abs(r["lambda_hat"]) - 3 * r["se"])
            print(f"Lambda_hat worst: {_fmt(worst['lambda_hat'])} (SE {_fmt(worst['se'])}) over {len(table)} "
                  f"directions", file=stream)
        for c in report.get("checks", []):
            if c["name"].startswith("optimality"):
                print(f"optimality worst increment: {_fmt(-c['lhs'])} (SE {_fmt(c['standard_error'])})",
                      file=stream)
            if c["name"].startswith("gap"):
                print(f"gap: K = {_fmt(c['lhs'])}, 2mu = {_fmt(c['rhs'])}", file=stream)
    elif kind == "game":
        print(f"J1 = {_fmt(res.get('J1'))} +- {_fmt(res.get('J1_se'))}   "
              f"J2 = {_fmt(res.get('J2'))} +- {_fmt(res.get('J2_se'))}", file=stream)
    elif kind == "bsde":
        hist = res.get("truncation_history") or []
        print(f"y(0) = {_fmt(res.get('y0'))}; horizons: "
              + ", ".join(f"{_fmt(h)}:{_fmt(dd)}" for h, dd in hist), file=stream)
    elif kind in ("fbsde", "fbsde-base"):
        print(f"x(0) = {_fmt(res.get('x0'))}, y(0) = {_fmt(res.get('y0'))}", file=stream)
        cmp_ = res.get("comparison")
        if cmp_:
            print(f"comparison: y_hat(0) = {_fmt(cmp_['y_hat0'])} (SE {_fmt(cmp_['y_hat0_se'])}), "
                  f"verdict {cmp_['verdict']}, tau_hat = {_fmt(cmp_['tau_hat'])}", file=stream)


def report(run_dir: str | Path, stream=None) -> int:
    """Print a summary of a run directory without modifying it."""
    stream = stream or sys.stdout
    d = Path(run_dir)
    mpath = d / "manifest.json"
    if not mpath.is_file():
        print(f"error: no manifest.json in {d}", file=sys.stderr)
        return EXIT_CONFIG
    manifest = json.loads(mpath.read_text(encoding="utf-8"))
    print(f"run: {manifest['kind']} seed {manifest['seed']} exit {manifest['exit_code']} "
          f"(code {manifest['code']['version']})", file=stream)
    if manifest.get("error"):
        print(f"error: {manifest['error']}", file=stream)
    rpath = d / "report.json"
    if not rpath.is_file():
        return EXIT_OK
    rep = json.loads(rpath.read_text(encoding="utf-8"))
    if manifest["kind"] == "verify-suite":
        for m in rep["members"]:
            print(f"seed {m['seed']}: exit {m['exit_code']}", file=stream)
        print(f"aggregate: {'pass' if rep['all_passed'] else 'FAIL'}", file=stream)
        return EXIT_OK
    _print_checks(rep, stream)
    _print_highlights(rep, stream)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ihfbsde", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="count", default=0, help="more log output (repeatable)")
    sub = ap.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run a config")
    r.add_argument("config", help="YAML or JSON config file")
    r.add_argument("-o", "--output", help="output directory (overrides the config)")
    r.add_argument("--seed", type=int, help="seed override")
    p = sub.add_parser("report", help="summarise a run directory")
    p.add_argument("run_dir")
    sub.add_parser("schema", help="print the config schema")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(message)s", stream=sys.stderr)
    if args.command == "run":
        return run(args.config, args.output, args.seed)
    if args.command == "report":
        return report(args.run_dir)
    print(json.dumps(_schema(), indent=2, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
