"""Acceptance criteria 1-10; each test records one PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``; the lines are
repeated in the "acceptance criteria" section of the terminal summary.
"""
import dataclasses
import json
import time

import numpy as np
import pytest

from conftest import record_criterion, reference
from graphon_teams.cli import SUBCOMMANDS, run_subcommand
from graphon_teams.config import reference_config
from graphon_teams.game import assemble, block_average_maps
from graphon_teams.graphon import Grid
from graphon_teams.riccati import (SolverConfig, best_response_riccati, certified_window_check,
                                   epsilon_continuation, relative_sup_error, solve_block_form,
                                   solve_coupled, solve_decoupled_pair)
from graphon_teams.simulate import (PathConfig, StrategyPerturbation, deviation_battery,
                                    weak_order_check)
from oracles import scalar_riccati

NAMES = ("scalar", "step", "cosine")
ALPHAS = (0.25, 0.5, 0.9)


def test_criterion_01_zero_coupling_decouples():
    cfg = reference_config("cosine")
    start = time.perf_counter()
    asm = assemble(cfg.game.replace(eps=0.0), Grid(16))
    solver = SolverConfig(dt=1e-4)
    sol = solve_coupled(asm, solver)
    e1, e2 = solve_decoupled_pair(asm, solver)
    err = max(relative_sup_error(sol.Pi1, e1), relative_sup_error(sol.Pi2, e2))
    secs = time.perf_counter() - start
    ok = err <= 1e-8 and secs <= 10.0
    assert record_criterion(1, ok, f"eps=0 coupled vs decoupled rel err {err:.2e} (<=1e-8), {secs:.1f}s (<=10s)")


def test_criterion_02_best_response_fixed_point():
    start = time.perf_counter()
    worst = {}
    for name in NAMES:
        cfg, asm, sol = reference(name)
        assert abs(cfg.game.eps) <= 0.1
        r1 = best_response_riccati(asm, cfg.solver, sol.Pi2, team=1)
        r2 = best_response_riccati(asm, cfg.solver, sol.Pi1, team=2)
        worst[name] = max(relative_sup_error(r1.values, sol.Pi1), relative_sup_error(r2.values, sol.Pi2))
    secs = time.perf_counter() - start
    ok = max(worst.values()) <= 1e-6 and secs <= 30.0
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    assert record_criterion(2, ok, f"best-response residuals {detail} (<=1e-6), {secs:.1f}s (<=30s)")


def test_criterion_03_block_form_equivalence():
    rel, off = {}, {}
    for name in NAMES:
        cfg, asm, sol = reference(name)
        blk = solve_block_form(asm, cfg.solver)
        rel[name] = max(relative_sup_error(blk.Pi1, sol.Pi1), relative_sup_error(blk.Pi2, sol.Pi2))
        off[name] = float(np.max(blk.offdiag_norms))
    ok = max(rel.values()) <= 1e-8 and max(off.values()) <= 1e-10
    assert record_criterion(3, ok, f"block form rel err max {max(rel.values()):.1e} (<=1e-8), "
                                   f"off-diagonal max {max(off.values()):.1e} (<=1e-10)")


def test_criterion_04_scalar_oracle_and_order():
    # eps = 0 as well: with cross coupling the n = 1 system is 2x2, not scalar
    cfg = reference_config("scalar")
    spec = cfg.game.replace(D1=0.0, D2=0.0, Gamma1=0.0, Gamma2=0.0, eps=0.0)
    asm = assemble(spec, Grid(1))
    sol = solve_coupled(asm, SolverConfig(dt=1e-4))
    tau = spec.T - sol.times
    errs = []
    for pi, (i, a, b, r, q, qf) in ((sol.Pi1, (0, spec.A1, spec.B1, spec.R11, spec.Q1, spec.Q1f)),
                                    (sol.Pi2, (1, spec.A2, spec.B2, spec.R22, spec.Q2, spec.Q2f))):
        exact = np.zeros_like(pi)
        exact[:, i, i] = scalar_riccati(a, 2 * b * b / r, 0.5 * q, 0.5 * qf, tau)
        errs.append(relative_sup_error(pi, exact))

    def pi0(dt):
        s = solve_coupled(asm, SolverConfig(dt=dt))
        return np.r_[s.Pi1[0].ravel(), s.Pi2[0].ravel()]

    h = 0.1
    ref = pi0(h / 8)
    ratio = np.linalg.norm(pi0(h) - ref) / np.linalg.norm(pi0(h / 2) - ref)
    ok = max(errs) <= 1e-6 and 12.0 <= ratio <= 20.0
    assert record_criterion(4, ok, f"closed-form rel err {max(errs):.1e} (<=1e-6) at dt=1e-4; "
                                   f"halving ratio {ratio:.2f} at dt={h} (in [12, 20])")


def test_criterion_05_certified_window():
    rows = []
    ok = True
    for name in NAMES:
        cfg, asm, sol = reference(name)
        for a in ALPHAS:
            chk = certified_window_check(asm, cfg.solver, a, sol)
            ok &= chk.bound.tau > 0 and chk.sup_norm <= chk.bound.r
            rows.append(chk.sup_norm / chk.bound.r)
    assert record_criterion(5, ok, f"9 windows, tau > 0, max sup-norm / r = {max(rows):.3f} (<=1)")


def test_criterion_06_value_matches_monte_carlo():
    cfg = reference_config("cosine")
    start = time.perf_counter()
    asm = assemble(cfg.game, Grid(32))
    sol = solve_coupled(asm, cfg.solver)
    pc = PathConfig(dt_sim=1e-3, num_paths=10_000, seed=cfg.simulation.seed, modes_used=16)
    w = weak_order_check(asm, sol, pc)
    secs = time.perf_counter() - start
    parts, ok = [], True
    for i in range(2):
        est = w.estimates[-1][i]
        gap = abs(est.mean - w.values[i])
        tol = 3 * est.std_err + w.c_bias[i] * pc.dt_sim
        ok &= gap <= tol and 1.6 <= w.ratios[i] <= 2.6
        parts.append(f"J{i + 1} gap {gap:.1e} <= {tol:.1e}, ratio {w.ratios[i]:.2f}")
    ok &= secs <= 300
    assert record_criterion(6, ok, "; ".join(parts) + f" (ratio in [1.6, 2.6]), {secs:.0f}s (<=300s)")


def test_criterion_07_deviation_battery():
    cfg, asm, sol = reference("cosine")
    pc = dataclasses.replace(cfg.simulation)
    perts = [StrategyPerturbation.scale(t, s) for t in (1, 2) for s in (0.5, 0.9, 1.1, 1.5)]
    perts.append(StrategyPerturbation.scale(1, 1.0))
    ests = deviation_battery(asm, sol, pc, perts)
    worst = min(e.mean / e.std_err for e in ests[:8])
    identity = ests[8]
    ok = all(e.mean >= -3 * e.std_err for e in ests[:8]) and identity.mean == 0.0 and identity.std_err == 0.0
    assert record_criterion(7, ok, f"8 deviations, min dJ/se = {worst:.1f} (>=-3); identity dJ = "
                                   f"{identity.mean!r} +- {identity.std_err!r}")


def test_criterion_08_continuation():
    cfg = reference_config("cosine")
    grid = Grid(cfg.grid_n)
    res = epsilon_continuation(cfg.game, grid, cfg.solver, 0.1, 10)
    by_eps = {round(s.eps, 12): s.sup_diff for s in res.steps}
    ratio = by_eps[0.1] / by_eps[0.05]
    ok = res.reached_target and res.achieved_eps == pytest.approx(0.1) and len(res.steps) == 10
    ok &= 1.7 <= ratio <= 2.3
    assert record_criterion(8, ok, f"reached eps={res.achieved_eps:g} in {len(res.steps)} steps, "
                                   f"halving ratio {ratio:.3f} (in [1.7, 2.3])")


def test_criterion_09_step_graphon_exactness():
    cfg = reference_config("step")
    coarse = solve_coupled(assemble(cfg.game, Grid(2)), cfg.solver)
    fine_grid = Grid(256)
    fine = solve_coupled(assemble(cfg.game, fine_grid), cfg.solver)
    r, l = block_average_maps(2, fine_grid)
    r2, l2 = np.kron(np.eye(2), r), np.kron(np.eye(2), l)
    err = max(np.abs(r2 @ f @ l2 - c).max() / np.abs(c).max()
              for c, f in ((coarse.Pi1, fine.Pi1), (coarse.Pi2, fine.Pi2)))
    assert record_criterion(9, err <= 1e-8, f"n=2 vs n=256 block averages rel err {err:.1e} (<=1e-8)")


def test_criterion_10_determinism(tmp_path):
    # step instance with reduced path counts keeps six subcommands twice within desk time
    base = reference_config("step")
    cfg = dataclasses.replace(
        base, simulation=dataclasses.replace(base.simulation, num_paths=200),
        studies=dataclasses.replace(base.studies, path_counts=(50, 100), grid_ns=(2, 4)))
    mismatched = []
    for name in SUBCOMMANDS:
        reports = []
        for run in ("a", "b"):
            out = tmp_path / name / run
            run_subcommand(name, cfg, out)
            reports.append(json.loads((out / "run_report.json").read_text())["manifest"])
        if reports[0] != reports[1] or not reports[0]:
            mismatched.append(name)
    assert record_criterion(10, not mismatched, f"{len(SUBCOMMANDS)} subcommands rerun, "
                                                f"digest mismatches: {mismatched or 'none'}")
