"""Acceptance criteria 1 to 10.

Each test prints one ``criterion N: PASS|FAIL ...`` line; the lines are
also collected in ``RESULTS`` and repeated in the pytest terminal summary.
Run on its own with ``pytest tests/test_acceptance.py -s``.
"""

from __future__ import annotations

import math
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from conftest import scalar_game, scalar_lq, scalar_system
from ihfbsde.algebraic import InitialCoupling, solve_initial_coupling
from ihfbsde.bsde import BsdeDriver, apriori_check, solve_finite, solve_infinite
from ihfbsde.cli import EXIT_OK, run
from ihfbsde.fbsde import Inhomogeneity, PicardConfig, comparison_check, contraction_check, solve_alpha0, \
    solve_picard, stability_scaling
from ihfbsde.game import deviation_test, player_control_spec, solve_nash, transform_agreement
from ihfbsde.lq import duality_residual, optimality_test, perturbation_directions, solve_soc
from ihfbsde.model import BsdeParams, MarkSpace, TimeGrid
from ihfbsde.noise import NoiseSpec, generate

RESULTS: dict[int, str] = {}
CONFIGS = Path(__file__).resolve().parents[1] / "configs"

# Real root of x + (x + 1)^3 = 0 (Phi(y) = -y^3, p = 1), frozen from a bisection on [-1, 0].
CUBIC_ROOT = -0.3176721961719807


def record(n: int, passed: bool, message: str) -> None:
    line = f"criterion {n}: {'PASS' if passed else 'FAIL'}  {message}"
    RESULTS[n] = line
    print(line)


def noise(grid: TimeGrid, M: int, seed: int, rate: float = 1.0):
    return generate(NoiseSpec(1, MarkSpace.single(rate), M, grid, seed))


# ---------------------------------------------------------------------------


def test_criterion_1_algebraic_solver():
    rng = np.random.default_rng(20240601)
    worst_res, worst_two, count = 0.0, 0.0, 0
    for j in range(200):
        kind = j % 4
        if kind in (0, 1):
            n = int(rng.integers(1, 5))
            G = rng.normal(size=(n, n))
            Q = G @ G.T if kind == 0 else G[:, : max(1, n - 1)] @ G[:, : max(1, n - 1)].T
            phi = (lambda Q: (lambda y: -Q @ np.asarray(y)))(Q)
            C = float(np.linalg.norm(Q, 2))
            p = rng.normal(size=n) * 3
        elif kind == 2:
            n = 1
            phi = lambda y: -np.asarray(y) ** 3
            p = rng.uniform(-5, 5, size=1)
            # y = x + p solves y + y^3 = p, so |y| <= min(|p|, |p|^(1/3)); Phi' is bounded near the root
            C = 3 * (min(abs(p[0]), abs(p[0]) ** (1 / 3)) + 1.5) ** 2
        else:
            n = 1
            phi = lambda y: -np.tanh(y) - np.asarray(y)
            p = rng.uniform(-10, 10, size=1)
            C = 2.0
        c = InitialCoupling(phi, C, p, tol=1e-11)
        x1 = solve_initial_coupling(c)
        start = x1 + rng.uniform(-0.5, 0.5, size=n)
        x2 = solve_initial_coupling(c, start=start)
        worst_res = max(worst_res, float(np.linalg.norm(x1 - phi(x1 + p))), float(np.linalg.norm(x2 - phi(x2 + p))))
        worst_two = max(worst_two, float(np.linalg.norm(x1 - x2)))
        count += 1
    root = solve_initial_coupling(InitialCoupling(lambda y: -np.asarray(y) ** 3, 3.0, [1.0], tol=1e-13))[0]
    root_err = abs(root - CUBIC_ROOT)
    ok = worst_res <= 1e-10 and worst_two <= 2e-10 and root_err <= 1e-9
    record(1, ok, f"{count} maps, max residual {worst_res:.2e} (<= 1e-10), two-start {worst_two:.2e} (<= 2e-10), "
                  f"cubic root {root:.12f} error {root_err:.1e} (<= 1e-9)")
    assert ok


def test_criterion_2_deterministic_oracles():
    mu, T = 1.0, 10.0
    phi = lambda t: np.array([np.exp(-t)])
    eta = lambda t: np.array([0.5 * np.exp(-2 * t)])
    psi = lambda t: np.array([[0.3 * np.exp(-t)]])
    xi = lambda t: np.array([[[0.2 * np.exp(-t)]]])
    Phi = lambda y: -0.5 * np.asarray(y)

    def p_exact(t):
        return np.exp(-t) * (1 - np.exp(-2 * (T - t))) / 2 + 0.5 * np.exp(-2 * t) * (1 - np.exp(-3 * (T - t))) / 3

    def rel(a, b):
        return float(np.max(np.abs(a - b)) / np.max(np.abs(b)))

    errors = []
    for N in (4000, 8000):
        grid = TimeGrid(T, N)
        nb = noise(grid, 16, 0)
        t = grid.times
        # p and x: deterministic drivers only, so the solution is path independent
        th = solve_alpha0(mu, Phi, Inhomogeneity(eta=eta, phi=phi), grid, nb, n=1, lipschitz_C=0.5)
        pe = p_exact(t)
        x0 = -0.5 * pe[0] / 1.5  # x0 = Phi(x0 + p0)
        ode = solve_ivp(lambda s, x: -mu * (x + p_exact(s)) + np.exp(-s), (0, T), [x0], t_eval=t, rtol=1e-12,
                        atol=1e-14)
        e_p = rel((th.y - th.x)[0, :, 0], pe)
        e_x = rel(th.x[0, :, 0], ode.y[0])
        # q and k: volatility drivers, read off the same base solver
        th2 = solve_alpha0(mu, Phi, Inhomogeneity(eta=eta, phi=phi, psi=psi, xi=xi), grid, nb, n=1,
                           lipschitz_C=0.5)
        e_q = rel(th2.z[0, :, 0, 0], 0.3 * np.exp(-t) / (1 + mu))
        e_k = rel(th2.r[0, :, 0, 0, 0], 0.2 * np.exp(-t) / (1 + mu))
        errors.append((max(e_p, e_x, e_q, e_k), e_p, e_x, e_q, e_k))
    (e1, *_), (e2, *_) = errors
    ok = e1 <= 0.02 and e2 <= 0.01 and e1 / e2 >= 1.8
    record(2, ok, f"max relative error {e1:.2e} at dt=2.5e-3 (<= 2%), {e2:.2e} at dt=1.25e-3 (<= 1%), "
                  f"ratio {e1 / e2:.2f}; (p, x, q, k) at dt=2.5e-3: "
                  + ", ".join(f"{v:.1e}" for v in errors[0][1:]))
    assert ok


def test_criterion_3_continuation_contraction():
    cs = scalar_system()
    grid = TimeGrid(8.0, 160)
    nb = noise(grid, 512, 0)
    rep = contraction_check(cs, grid, nb, n_pairs=50, seed=0)
    record(3, rep.passed, f"max ratio over 50 pairs {rep.lhs:.4f} (SE {rep.standard_error:.1e}) <= 0.5 + 3 SE; "
                          f"delta0 {rep.detail['delta0']:.4f}, eps {rep.detail['epsilon']:.3f}")
    assert rep.passed


def test_criterion_4_apriori_estimate():
    grid = TimeGrid(6.0, 300)
    M = 512
    fails, ratios = [], []
    for s in range(20):
        rng = np.random.default_rng(1000 + s)
        nb = noise(grid, M, s)
        W = nb.cumulative_brownian()
        rho, c1, c2 = rng.uniform(0.5, 2.0), rng.uniform(0, 0.4), rng.uniform(0, 0.4)
        K, delta = rng.uniform(0.2, 1.0), rng.uniform(0.2, 0.8)
        cubic = s % 2 == 1

        def G(t, y, z, r, rho=rho, c1=c1, c2=c2, cubic=cubic):
            out = -rho * y + c1 * z[:, :, 0] + c2 * r[:, :, 0, 0]
            if cubic:
                out = out - np.clip(y, -1, 1) ** 3
            return out

        P = BsdeParams(rho=rho, C0=rho + c1 + c2 + (3 if cubic else 0), C1=c1, C2=c2, K=K, delta=delta)
        assert P.gap > 0
        tt = grid.times[None, :, None]
        a1, a2, b1 = rng.normal(size=3)
        phi1 = a1 * np.exp(-tt) * (1 + 0.5 * np.tanh(W))
        phi2 = a2 * np.exp(-tt) + b1 * np.exp(-2 * tt) * np.tanh(W)
        s1 = solve_finite(BsdeDriver(G, phi1, P), grid, nb)
        s2 = solve_finite(BsdeDriver(G, phi2, P), grid, nb)
        rep = apriori_check(s1, s2, phi1, phi2, P, K)
        ratios.append(rep.detail["ratio"])
        if not rep.passed:
            fails.append(s)
    ok = not fails
    record(4, ok, f"20 pairs (10 linear, 10 clipped cubic), failures {fails}, lhs/rhs in "
                  f"[{min(ratios):.3f}, {max(ratios):.3f}]")
    assert ok


def test_criterion_5_truncation_convergence():
    drv = BsdeDriver(lambda t, y, z, r: -y, lambda t: np.array([np.exp(-t)]),
                     BsdeParams(rho=1.0, C0=1.0, K=0.5), m=1)
    sol = solve_infinite(drv, tol=1e-3, dt=0.01)
    dists = [d for _, d in sol.truncation_history]
    monotone = all(b < a for a, b in zip(dists[1:], dists[2:]))
    ok = monotone and dists[-1] < 1e-3 and len(dists) <= 6
    record(5, ok, f"distances {', '.join(f'{d:.2e}' for d in dists)} over horizons "
                  f"{', '.join(f'{h:g}' for h, _ in sol.truncation_history)}")
    assert ok


def test_criterion_6_comparison():
    cs = scalar_system()
    grid = TimeGrid(8.0, 160)
    cfg = PicardConfig(tol=1e-8, damping=1.0, sweep="splitting", max_iter=300)
    phi2 = cs.phi

    def phi1(y):
        return phi2(y) + 0.5
    fails, y_hats = [], []
    for seed in range(10):
        nb = noise(grid, 512, seed)
        base = solve_picard(cs.replace(phi=phi2), grid, nb, cfg)[0]
        shifted = solve_picard(cs.replace(phi=phi1), grid, nb, cfg)[0]
        again = solve_picard(cs.replace(phi=phi2), grid, nb, cfg)[0]
        pos = comparison_check(cs, phi1, phi2, grid, nb, solutions=(shifted, base))
        zero = comparison_check(cs, phi2, phi2, grid, nb, solutions=(again, base))
        y_hats.append(pos["y_hat0"][0])
        ok_pos = pos["case"] == "i" and pos["verdict"] and pos["series_nonnegative"]
        ok_zero = zero["case"] == "ii" and zero["verdict"] and zero["series_nonnegative"]
        if not (ok_pos and ok_zero):
            fails.append(seed)
    ok = not fails
    record(6, ok, f"10 seeds x (c=0.5, c=0), failures {fails}; y_hat(0) for c=0.5 in "
                  f"[{min(y_hats):.4f}, {max(y_hats):.4f}]")
    assert ok


def test_criterion_7_stability_scaling():
    cs = scalar_system()
    grid = TimeGrid(8.0, 160)
    nb = noise(grid, 512, 0)
    plain = stability_scaling(cs, [1.0], 0.2, grid, nb)
    strong = stability_scaling(cs, [1.0], 0.2, grid, nb, strong_nu=0.5)
    ok = plain.passed and strong.passed
    record(7, ok, f"distance ratio h vs h/2: plain {plain.lhs:.3f}, strong (nu=0.5) {strong.lhs:.3f}, band [3.0, 5.3]")
    assert ok


def test_criterion_8_lq_duality_and_optimality():
    grid = TimeGrid(10.0, 400)
    parts, ok = [], True
    for Q in (0.0, 1.0):
        spec = scalar_lq(Q=Q)
        nb = noise(grid, 256, 0)
        sol = solve_soc(spec, grid, nb)
        lam = [duality_residual(sol, sol.u + w, spec, grid, nb)
               for w in perturbation_directions(nb, grid, 1, 20, seed=1)]
        lam_ok = all(abs(d["lambda_hat"]) <= 3 * d["se"] + 1e-9 * max(1.0, d["scale"]) for d in lam)
        rep = optimality_test(sol, spec, grid, nb, n_perturbations=50)
        r2 = rep.detail["min_r2"]
        a_pos = rep.detail["a_positive"]
        good = lam_ok and rep.passed and a_pos and r2 >= 0.99 and rep.detail["deterministic"]
        ok &= good
        worst = max(lam, key=lambda d: abs(d["lambda_hat"]) - 3 * d["se"])
        parts.append(f"Q={Q:g}: J={sol.J_estimate:.5f}, worst |Lambda| {abs(worst['lambda_hat']):.1e} "
                     f"(SE {worst['se']:.1e}), worst increment {-rep.lhs:.2e}, min R^2 {r2:.6f}")
    record(8, ok, "; ".join(parts))
    assert ok


def test_criterion_9_game_pipeline():
    grid = TimeGrid(10.0, 400)
    nb = noise(grid, 256, 0)
    tol = 1e-9
    cfg = PicardConfig(tol=tol, max_iter=400)
    spec = scalar_game()
    a = solve_nash(spec, grid, nb, config=cfg)
    b = solve_nash(spec, grid, nb, route="direct", config=cfg)
    agree = transform_agreement(a, b, spec, grid, 3 * (2 * tol))
    devs = [deviation_test(a, spec, p, grid, nb, n_deviations=50) for p in (1, 2)]
    # silent second player: player 1 faces a plain control problem
    spec0 = scalar_game(D2=0.0)
    c = solve_nash(spec0, grid, nb, config=cfg)
    s = solve_soc(player_control_spec(spec0, 0, mu=None), grid, nb, config=cfg)
    w = np.exp(spec0.K * grid.times[:-1])[None]
    du = math.sqrt(float(np.mean(np.sum(np.sum((c.u1 - s.u)[:, :-1] ** 2, axis=2) * w, axis=1))) * grid.dt)
    deg_ok = du <= 3 * (2 * tol) and np.all(c.u2 == 0) and abs(c.J1 - s.J_estimate) <= 3 * (2 * tol) * max(1, s.J_estimate)
    ok = a.reconstruction["passed"] and agree.passed and all(d.passed for d in devs) and bool(deg_ok)
    record(9, ok, f"reconstruction {a.reconstruction['residual']:.1e} <= {a.reconstruction['tolerance']:.1e}; "
                  f"direct vs transform {agree.lhs:.1e} <= {agree.rhs:.1e}; deviations "
                  f"{'/'.join('pass' if d.passed else 'FAIL' for d in devs)} (worst increments "
                  f"{-devs[0].lhs:.1e}, {-devs[1].lhs:.1e}); "
                  f"D2=0 control distance {du:.1e}, |dJ| {abs(c.J1 - s.J_estimate):.1e}")
    assert ok


def test_criterion_10_determinism(tmp_path):
    configs = sorted(CONFIGS.glob("*.yaml"))
    mismatched, codes = [], {}
    t0 = time.time()
    for cfg in configs:
        dirs = [tmp_path / f"{cfg.stem}-{i}" for i in (1, 2)]
        for d in dirs:
            codes.setdefault(cfg.name, []).append(run(cfg, d))
        files_a = sorted(p.relative_to(dirs[0]) for p in dirs[0].rglob("*") if p.is_file())
        files_b = sorted(p.relative_to(dirs[1]) for p in dirs[1].rglob("*") if p.is_file())
        if files_a != files_b:
            mismatched.append(f"{cfg.name}: file sets differ")
            continue
        for f in files_a:
            if (dirs[0] / f).read_bytes() != (dirs[1] / f).read_bytes():
                mismatched.append(f"{cfg.name}: {f}")
    all_ok = all(c == [EXIT_OK, EXIT_OK] for c in codes.values())
    ok = not mismatched and all_ok
    record(10, ok, f"{len(configs)} configs run twice, mismatched artifacts {mismatched or 'none'}, "
                   f"exit codes {'all 0' if all_ok else codes}, {time.time() - t0:.0f} s")
    assert ok


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q", "-s"]))
