"""Command-line front end: ``graphon-teams <subcommand> CONFIG``.

Every run writes into one output directory, guarded by a lock file, and
finishes with ``run_report.json`` (phase statuses, timings, and a sha256
manifest of every result file).  Result files carry no timestamps, so a
rerun with the same config reproduces them byte for byte.

Environment: ``GRAPHON_TEAMS_OUT`` overrides the output directory from the
config; ``GRAPHON_TEAMS_THREADS`` is the thread-count hint for Monte Carlo.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import dataclasses
import hashlib
import io
import json
import math
import os
import subprocess
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig, load_config, reference_config, serialize_config
from .game import assemble
from .graphon import Grid
from .riccati import (best_response_riccati, certified_window_check, epsilon_continuation,
                      feedback_gain, relative_sup_error, solve_coupled, value_at)
from .simulate import (CostEstimate, PathConfig, StrategyPerturbation, default_threads, deviation_battery,
                       estimate_costs, simulate_closed_loop, weak_order_check)

SUBCOMMANDS = ("solve", "simulate", "verify-nash", "continuation", "bounds", "convergence")

EXIT_OK, EXIT_PHASE_FAILED, EXIT_USAGE, EXIT_LOCKED = 0, 1, 2, 3


class AssertionFailed(Exception):
    pass


class LockedError(RuntimeError):
    pass


def _clean(obj):
    """JSON-safe copy: non-finite floats become strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def artifact_version() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True,
                             text=True, cwd=Path(__file__).parent, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


@dataclass
class RunReport:
    command: str
    config_hash: str
    version: str
    phases: dict = field(default_factory=dict)
    manifest: dict = field(default_factory=dict)

    @property
    def exit_code(self) -> int:
        ok = all(p["status"] == "complete" for p in self.phases.values())
        return EXIT_OK if ok else EXIT_PHASE_FAILED

    def to_dict(self) -> dict:
        return {"command": self.command, "config_hash": self.config_hash, "version": self.version,
                "exit_code": self.exit_code, "phases": self.phases, "manifest": self.manifest}


class _Run:
    def __init__(self, command: str, config: ExperimentConfig, out_dir: Path):
        self.config = config
        self.out = out_dir
        self.report = RunReport(command, config.digest(), artifact_version())

    @contextlib.contextmanager
    def phase(self, name: str):
        start = time.perf_counter()
        entry = {"status": "complete", "note": ""}
        self.report.phases[name] = entry
        try:
            yield entry
        except AssertionFailed as e:
            entry["status"] = "assertion_failed"
            entry["note"] = str(e)
        except Exception as e:  # phase failures are reported, later phases still run
            entry["status"] = "failed"
            entry["note"] = f"{type(e).__name__}: {e}"
        entry["seconds"] = round(time.perf_counter() - start, 3)

    def ok(self, name: str) -> bool:
        return self.report.phases.get(name, {}).get("status") == "complete"

    def _record(self, name: str, data: bytes):
        path = self.out / name
        path.write_bytes(data)
        self.report.manifest[name] = hashlib.sha256(data).hexdigest()

    def write_json(self, name: str, obj):
        text = json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n"
        self._record(name, text.encode())

    def write_csv(self, name: str, header, rows):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
        self._record(name, buf.getvalue().encode())


# --- phases ------------------------------------------------------------------

def _solve_phase(run: _Run, write: bool = True):
    cfg = run.config
    asm = assemble(cfg.game, Grid(cfg.grid_n))
    state = {"asm": asm, "sol": None}
    with run.phase("solve") as ph:
        sol = solve_coupled(asm, cfg.solver)
        state["sol"] = sol
        if write:
            _write_solution(run, asm, sol)
        if not sol.complete:
            raise AssertionFailed(f"Riccati flow escaped at t={sol.escape_time}")
        if not (np.array_equal(sol.Pi1[-1], asm.G1_blk) and np.array_equal(sol.Pi2[-1], asm.G2_blk)):
            raise AssertionFailed("terminal node differs from the assembled G blocks")
        ph["note"] = "complete"
    return state


def _write_solution(run: _Run, asm, sol):
    n1, n2 = sol.spectral_norms()
    m1, m2 = sol.min_eigenvalues()
    header = ["t", "q1", "q2", "norm_pi1", "norm_pi2", "min_eig_pi1", "min_eig_pi2",
              "gain_norm1", "gain_norm2"]
    m = 2 * asm.n
    flat = run.config.outputs.flatten_pi
    if flat:
        header += [f"pi1_{i}_{j}" for i in range(m) for j in range(m)]
        header += [f"pi2_{i}_{j}" for i in range(m) for j in range(m)]
    rows = []
    for k, t in enumerate(sol.times):
        if np.all(np.isfinite(sol.Pi1[k])) and np.all(np.isfinite(sol.Pi2[k])):
            k1 = -(2.0 / asm.spec.R11) * asm.B1_map.T @ sol.Pi1[k]
            k2 = -(2.0 / asm.spec.R22) * asm.B2_map.T @ sol.Pi2[k]
            g1, g2 = np.linalg.norm(k1, 2), np.linalg.norm(k2, 2)
        else:
            g1 = g2 = math.nan
        row = [t, sol.q1[k], sol.q2[k], n1[k], n2[k], m1[k], m2[k], g1, g2]
        if flat:
            row += list(sol.Pi1[k].ravel()) + list(sol.Pi2[k].ravel())
        rows.append(row)
    run.write_csv("solution.csv", header, rows)
    summary = {"status": sol.status, "escape_time": sol.escape_time, "grid_n": asm.n,
               "dt": run.config.solver.dt, "config_hash": run.report.config_hash,
               "terminal_exact": bool(np.array_equal(sol.Pi1[-1], asm.G1_blk)
                                      and np.array_equal(sol.Pi2[-1], asm.G2_blk)),
               "min_eigenvalue": [float(np.nanmin(m1)), float(np.nanmin(m2))]}
    if sol.complete:
        summary["values"] = list(value_at(sol, asm))
    run.write_json("solution_summary.json", summary)


def _path_config(cfg: ExperimentConfig, **changes) -> PathConfig:
    return dataclasses.replace(cfg.simulation, threads=default_threads(), **changes)


def cmd_solve(run: _Run):
    _solve_phase(run)


def cmd_simulate(run: _Run):
    state = _solve_phase(run)
    if not run.ok("solve"):
        return
    asm, sol = state["asm"], state["sol"]
    pc = _path_config(run.config)
    with run.phase("simulate"):
        res = simulate_closed_loop(asm, sol, pc)
        ok = ~res.flagged
        e1, e2 = CostEstimate.from_samples(res.cost1[ok]), CostEstimate.from_samples(res.cost2[ok])
        values = value_at(sol, asm)
        run.write_json("simulation_summary.json", {
            "spec_hash": run.report.config_hash, "seed": pc.seed, "num_paths": pc.num_paths,
            "dt_sim": pc.dt_sim, "modes_used": pc.modes_used, "flagged_paths": res.num_flagged,
            "J1": e1.to_dict(), "J2": e2.to_dict(), "analytic": list(values)})
        if run.config.outputs.per_path_csv:
            run.write_csv("per_path.csv", ["path", "cost1", "cost2", "flagged"],
                          [(i, res.cost1[i], res.cost2[i], int(res.flagged[i]))
                           for i in range(len(res.cost1))])
        if res.num_flagged:
            raise AssertionFailed(f"{res.num_flagged} paths overflowed")


def cmd_verify_nash(run: _Run):
    state = _solve_phase(run)
    if not run.ok("solve"):
        return
    asm, sol = state["asm"], state["sol"]
    cfg, st = run.config, run.config.studies
    report = {"spec_hash": run.report.config_hash}

    with run.phase("best_response"):
        res = []
        for team, own, opp in ((1, sol.Pi1, sol.Pi2), (2, sol.Pi2, sol.Pi1)):
            br = best_response_riccati(asm, cfg.solver, opp, team)
            res.append(relative_sup_error(br.values, own) if br.complete else math.inf)
        report["best_response_residual"] = res
        report["best_response_tol"] = st.best_response_tol
        run.write_json("nash_report.json", report)
        if max(res) > st.best_response_tol:
            raise AssertionFailed(f"best-response residuals {res} exceed {st.best_response_tol}")

    pc = _path_config(cfg)
    with run.phase("deviations"):
        perts = [StrategyPerturbation.scale(team, s) for team in (1, 2) for s in st.scales]
        for team in (1, 2):
            # offset along the team's first noise mode
            col = np.flatnonzero(asm.noise_team == team)
            n = asm.n
            if len(col):
                d = asm.noise_modes[:n, col[0]] if team == 1 else asm.noise_modes[n:, col[0]]
            else:
                d = np.ones(n)
            perts.append(StrategyPerturbation.offset(team, d, st.offset_magnitude))
        perts.append(StrategyPerturbation.scale(1, 1.0))
        ests = deviation_battery(asm, sol, pc, perts)
        rows, failures = [], []
        for p, e in zip(perts, ests):
            identity = p.kind == "scale" and p.factor == 1.0
            passed = (e.mean == 0.0 and e.std_err == 0.0) if identity else e.mean >= -3 * e.std_err
            rows.append((p.label(), e.mean, e.std_err, e.num_paths, int(passed)))
            if not passed:
                failures.append(p.label())
        run.write_csv("deviations.csv", ["perturbation", "delta_J_mean", "delta_J_std_err",
                                         "num_paths", "passed"], rows)
        if failures:
            raise AssertionFailed(f"Nash inequality violated for {failures}")

    with run.phase("value_vs_monte_carlo"):
        w = weak_order_check(asm, sol, pc)
        ests = w.estimates[-1]
        checks = []
        for i in range(2):
            tol = 3 * ests[i].std_err + w.c_bias[i] * pc.dt_sim
            gap = abs(ests[i].mean - w.values[i])
            checks.append({"team": i + 1, "estimate": ests[i].to_dict(), "analytic": w.values[i],
                           "gap": gap, "tolerance": tol, "weak_order_ratio": w.ratios[i],
                           "c_bias": w.c_bias[i], "passed": gap <= tol})
        report["value_vs_monte_carlo"] = checks
        report["weak_order"] = {"dt_sims": list(w.dts),
                                "means": [[e[0].mean, e[1].mean] for e in w.estimates]}
        run.write_json("nash_report.json", report)
        if not all(c["passed"] for c in checks):
            raise AssertionFailed("Monte Carlo cost differs from the value formula")


def cmd_continuation(run: _Run):
    cfg, st = run.config, run.config.studies
    with run.phase("continuation"):
        res = epsilon_continuation(cfg.game, Grid(cfg.grid_n), cfg.solver, st.eps_target,
                                   st.continuation_steps)
        run.write_csv("continuation.csv", ["eps", "status", "escape_time", "sup_diff"],
                      [(0.0, "complete", "", 0.0)]
                      + [(s.eps, s.status, "" if s.escape_time is None else s.escape_time, s.sup_diff)
                         for s in res.steps])
        run.write_json("continuation_summary.json", {
            "eps_target": st.eps_target, "steps": st.continuation_steps,
            "achieved_eps": res.achieved_eps, "reached_target": res.reached_target,
            "decoupling_error": res.decoupling_error})
        if res.decoupling_error > 1e-8:
            raise AssertionFailed(f"eps=0 solve differs from decoupled solves by {res.decoupling_error}")


def cmd_bounds(run: _Run):
    cfg = run.config
    state = _solve_phase(run, write=False)
    asm = state["asm"]
    sol = state["sol"] if run.ok("solve") else None
    with run.phase("bounds"):
        records, bad = [], []
        for a in cfg.studies.alphas:
            chk = certified_window_check(asm, cfg.solver, a, sol)
            b = chk.bound
            rec = {"alpha": a, "r": b.r, "tau": b.tau, "c1": b.c1, "c2": b.c2,
                   "degenerate": b.degenerate, "window_sup_norm": chk.sup_norm,
                   "nodes_checked": chk.nodes_checked,
                   "norms": dataclasses.asdict(b.norms) if b.norms is not None else None}
            if b.degenerate:
                rec["note"] = "zero data: the solution vanishes identically"
            elif b.tau == 0:
                rec["note"] = "no certified window"
            else:
                rec["note"] = "window respected" if chk.ok else "window violated"
                if not chk.ok:
                    bad.append(a)
            records.append(rec)
        run.write_json("bounds.json", {"spec_hash": run.report.config_hash, "bounds": records})
        if bad:
            raise AssertionFailed(f"solution norm exceeds r inside the window for alpha={bad}")


def cmd_convergence(run: _Run):
    cfg, st = run.config, run.config.studies

    with run.phase("grid_refinement"):
        rows, prev = [], None
        for n in st.grid_ns:
            asm = assemble(cfg.game, Grid(n))
            sol = solve_coupled(asm, cfg.solver)
            v = value_at(sol, asm)
            diff = [abs(v[i] - prev[i]) for i in range(2)] if prev else [math.nan, math.nan]
            rows.append((n, v[0], v[1], diff[0], diff[1]))
            prev = v
        run.write_csv("convergence_grid.csv", ["n", "J1", "J2", "diff_J1", "diff_J2"], rows)

    asm = assemble(cfg.game, Grid(cfg.grid_n))
    with run.phase("dt_refinement"):
        ref = solve_coupled(asm, dataclasses.replace(cfg.solver, dt=min(st.dts) / 4))
        rows = []
        for dt in st.dts:
            sol = solve_coupled(asm, dataclasses.replace(cfg.solver, dt=dt))
            e1 = float(np.linalg.norm(sol.Pi1[0] - ref.Pi1[0], 2))
            e2 = float(np.linalg.norm(sol.Pi2[0] - ref.Pi2[0], 2))
            rows.append((dt, e1, e2))
        run.write_csv("convergence_dt.csv", ["dt", "err_pi1_t0", "err_pi2_t0"], rows)

    sol = solve_coupled(asm, cfg.solver)
    if not sol.complete:
        with run.phase("monte_carlo_refinement"):
            raise AssertionFailed(f"Riccati flow escaped at t={sol.escape_time}")
        return
    values = value_at(sol, asm)
    with run.phase("dt_sim_refinement"):
        h = min(st.dt_sims)
        rows = []
        for d in st.dt_sims:
            e1, e2 = estimate_costs(asm, sol, _path_config(cfg, dt_sim=d, noise_dt=h))
            rows.append((d, e1.mean, e1.std_err, e2.mean, e2.std_err,
                         e1.mean - values[0], e2.mean - values[1]))
        run.write_csv("convergence_dt_sim.csv", ["dt_sim", "J1", "se1", "J2", "se2", "gap1", "gap2"], rows)

    with run.phase("path_refinement"):
        rows = []
        for npaths in st.path_counts:
            e1, e2 = estimate_costs(asm, sol, _path_config(cfg, num_paths=npaths))
            rows.append((npaths, e1.mean, e1.std_err, e2.mean, e2.std_err))
        run.write_csv("convergence_paths.csv", ["num_paths", "J1", "se1", "J2", "se2"], rows)


_COMMANDS = {"solve": cmd_solve, "simulate": cmd_simulate, "verify-nash": cmd_verify_nash,
             "continuation": cmd_continuation, "bounds": cmd_bounds, "convergence": cmd_convergence}


@contextlib.contextmanager
def _lock(out_dir: Path):
    lock = out_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise LockedError(f"{out_dir} is in use by another run (remove {lock} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def run_subcommand(name: str, config: ExperimentConfig, out_dir=None) -> RunReport:
    if name not in _COMMANDS:
        raise ValueError(f"unknown subcommand {name!r}; expected one of {SUBCOMMANDS}")
    out = Path(out_dir or os.environ.get("GRAPHON_TEAMS_OUT") or config.outputs.directory)
    out.mkdir(parents=True, exist_ok=True)
    with _lock(out):
        run = _Run(name, config, out)
        run._record("config.yaml", serialize_config(config).encode())
        _COMMANDS[name](run)
        text = json.dumps(_clean(run.report.to_dict()), indent=2, sort_keys=True) + "\n"
        (out / "run_report.json").write_text(text)
    return run.report


def _load(arg: str) -> ExperimentConfig:
    if arg.startswith("ref:"):
        return reference_config(arg[4:])
    return load_config(arg)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="graphon-teams",
        description="Solve and verify feedback Nash equilibria of two graphon-team LQ games.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("config", help="YAML config file, or ref:scalar / ref:step / ref:cosine")
        p.add_argument("--out", help="output directory (overrides config and GRAPHON_TEAMS_OUT)")
        p.add_argument("--flatten-pi", action="store_true", help="write every Pi entry to solution.csv")
        p.add_argument("--per-path-csv", action="store_true", help="write per-path Monte Carlo costs")
        p.add_argument("--seed", type=int, help="override simulation.seed")
        p.add_argument("--num-paths", type=int, help="override simulation.num_paths")
        p.add_argument("--grid-n", type=int, help="override grid_n")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _load(args.config)
        outputs = dataclasses.replace(cfg.outputs, flatten_pi=cfg.outputs.flatten_pi or args.flatten_pi,
                                      per_path_csv=cfg.outputs.per_path_csv or args.per_path_csv)
        sim = cfg.simulation
        if args.seed is not None:
            sim = dataclasses.replace(sim, seed=args.seed)
        if args.num_paths is not None:
            sim = dataclasses.replace(sim, num_paths=args.num_paths)
        cfg = dataclasses.replace(cfg, outputs=outputs, simulation=sim,
                                  grid_n=args.grid_n if args.grid_n is not None else cfg.grid_n)
    except ConfigError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except (OSError, KeyError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    try:
        report = run_subcommand(args.command, cfg, args.out)
    except LockedError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_LOCKED
    for name, ph in report.phases.items():
        print(f"{name:24s} {ph['status']:18s} {ph.get('note', '')}")
    return report.exit_code


if __name__ == "__main__":
    sys.exit(main())
