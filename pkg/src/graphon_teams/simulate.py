"""Monte Carlo simulation of the closed-loop game under equilibrium feedback.

Every path owns a counter-based Philox stream keyed by (seed, path index),
so baseline and perturbed runs see identical noise and results do not
depend on batching or thread schedule.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .game import AssembledGame
from .riccati import EscapedSolutionError, RiccatiSolution, feedback_gain, value_at

BATCH_SIZE = 256


@dataclass(frozen=True)
class PathConfig:
    """``noise_dt`` is the resolution of the per-path noise stream.

    It defaults to ``dt_sim``; setting it finer and equal across runs makes
    runs at several ``dt_sim`` share the same Brownian paths.
    """

    dt_sim: float = 1e-3
    num_paths: int = 1000
    seed: int = 0
    modes_used: Optional[int] = None
    noise_dt: Optional[float] = None
    threads: int = 1

    def violations(self) -> list[str]:
        out = []
        if not self.dt_sim > 0:
            out.append(f"dt_sim must be > 0, got {self.dt_sim}")
        if int(self.num_paths) != self.num_paths or self.num_paths < 1:
            out.append(f"num_paths must be >= 1, got {self.num_paths}")
        if int(self.seed) != self.seed or not 0 <= self.seed < 2 ** 64:
            out.append(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        if self.modes_used is not None and (int(self.modes_used) != self.modes_used or self.modes_used < 0):
            out.append(f"modes_used must be a natural number, got {self.modes_used}")
        if self.noise_dt is not None and not self.noise_dt > 0:
            out.append(f"noise_dt must be > 0, got {self.noise_dt}")
        return out

    def __post_init__(self):
        errors = self.violations()
        if errors:
            raise ValueError("; ".join(errors))


@dataclass(frozen=True)
class CostEstimate:
    mean: float
    std_err: float
    num_paths: int

    @classmethod
    def from_samples(cls, x: np.ndarray) -> "CostEstimate":
        n = len(x)
        if n == 0:
            return cls(math.nan, math.nan, 0)
        # identical samples (deterministic paths) give an exact zero, free of mean roundoff
        spread = n > 1 and not np.all(x == x[0])
        se = float(np.std(x, ddof=1) / math.sqrt(n)) if spread else 0.0
        return cls(float(np.mean(x)), se, n)

    def to_dict(self) -> dict:
        return {"mean": self.mean, "std_err": self.std_err, "num_paths": self.num_paths}


@dataclass(frozen=True, eq=False)
class StrategyPerturbation:
    """Unilateral deviation of one team from its equilibrium feedback.

    ``kind == "scale"`` multiplies the feedback by ``factor``;
    ``kind == "additive_constant"`` adds ``magnitude * direction``.
    """

    team: int
    kind: str = "scale"
    factor: float = 1.0
    direction: Optional[np.ndarray] = None
    magnitude: float = 0.0

    def __post_init__(self):
        if self.team not in (1, 2):
            raise ValueError(f"team must be 1 or 2, got {self.team}")
        if self.kind not in ("scale", "additive_constant"):
            raise ValueError(f"unknown perturbation kind {self.kind!r}")
        if self.kind == "additive_constant" and self.direction is None:
            raise ValueError("additive_constant needs a direction")

    @classmethod
    def scale(cls, team: int, factor: float) -> "StrategyPerturbation":
        return cls(team, "scale", factor=factor)

    @classmethod
    def offset(cls, team: int, direction, magnitude: float) -> "StrategyPerturbation":
        return cls(team, "additive_constant", direction=np.asarray(direction, dtype=float),
                   magnitude=magnitude)

    def apply(self, u: np.ndarray) -> np.ndarray:
        if self.kind == "scale":
            return u * self.factor
        return u + self.magnitude * self.direction

    def label(self) -> str:
        if self.kind == "scale":
            return f"team{self.team}:scale({self.factor:g})"
        return f"team{self.team}:offset({self.magnitude:g})"


def _steps(span: float, dt: float, what: str) -> int:
    k = int(round(span / dt))
    if k < 1 or abs(k * dt - span) > 1e-9 * max(span, 1.0):
        raise ValueError(f"{what}: {dt} does not divide {span}")
    return k


def _noise_matrix(asm: AssembledGame, modes_used: Optional[int], with_sigma: bool = True) -> np.ndarray:
    """Columns sqrt(lambda_k) * (Sigma) e_k for the modes in use, shape (2n, K1+K2)."""
    lam = asm.noise_eigenvalues
    keep = np.ones(len(lam), dtype=bool)
    if modes_used is not None:
        for team in (1, 2):
            idx = np.flatnonzero(asm.noise_team == team)
            keep[idx[modes_used:]] = False
    modes = asm.Sigma @ asm.noise_modes if with_sigma else np.array(asm.noise_modes)
    return modes * np.where(keep, np.sqrt(lam), 0.0)


def path_stream(seed: int, path_index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[int(seed), int(path_index)]))


def sample_wiener_increment(asm: AssembledGame, cfg: PathConfig, rng: np.random.Generator,
                            dt: Optional[float] = None) -> np.ndarray:
    """One increment of W = (W^1; W^2) over ``dt`` (default ``cfg.dt_sim``)."""
    dt = cfg.dt_sim if dt is None else dt
    xi = rng.standard_normal(asm.noise_modes.shape[1])
    return math.sqrt(dt) * (_noise_matrix(asm, cfg.modes_used, with_sigma=False) @ xi)


@dataclass(eq=False)
class PathResult:
    cost1: np.ndarray
    cost2: np.ndarray
    terminal: np.ndarray
    flagged: np.ndarray  # True where the path overflowed and is excluded

    @property
    def num_flagged(self) -> int:
        return int(self.flagged.sum())


def _gain_tables(asm, solution, n_steps, dt_sim):
    k1 = np.empty((n_steps, asm.n, 2 * asm.n))
    k2 = np.empty_like(k1)
    for j in range(n_steps):
        k1[j], k2[j] = feedback_gain(solution, asm, j * dt_sim)
    return k1, k2


def simulate_closed_loop(asm: AssembledGame, solution: RiccatiSolution, cfg: PathConfig,
                         perturbation: Optional[StrategyPerturbation] = None) -> PathResult:
    """Euler-Maruyama paths with left-endpoint running costs plus terminal costs."""
    if not solution.complete:
        raise EscapedSolutionError("simulation needs a complete Riccati solution")
    spec, n = asm.spec, asm.n
    n_steps = _steps(spec.T, cfg.dt_sim, "dt_sim")
    noise_dt = cfg.dt_sim if cfg.noise_dt is None else cfg.noise_dt
    sub = _steps(cfg.dt_sim, noise_dt, "noise_dt")
    k1, k2 = _gain_tables(asm, solution, n_steps, cfg.dt_sim)
    noise_t = math.sqrt(noise_dt) * _noise_matrix(asm, cfg.modes_used).T
    n_modes = noise_t.shape[0]
    a_t, b1_t, b2_t = asm.A_eps.T, asm.B1_map.T, asm.B2_map.T
    c1_t, c2_t = asm.cost_map1.T, asm.cost_map2.T
    dt = cfg.dt_sim
    w1 = 0.5 * dt / n
    eps = spec.eps

    def run_batch(start):
        idx = range(start, min(start + BATCH_SIZE, cfg.num_paths))
        b = len(idx)
        xi = np.empty((b, n_steps * sub, n_modes))
        for r, p in enumerate(idx):
            xi[r] = path_stream(cfg.seed, p).standard_normal((n_steps * sub, n_modes))
        if sub > 1:
            xi = xi.reshape(b, n_steps, sub, n_modes).sum(axis=2)
        x = np.tile(asm.x0, (b, 1))
        cost1 = np.zeros(b)
        cost2 = np.zeros(b)
        with np.errstate(over="ignore", invalid="ignore"):
            for j in range(n_steps):
                u1 = x @ k1[j].T
                u2 = x @ k2[j].T
                if perturbation is not None:
                    if perturbation.team == 1:
                        u1 = perturbation.apply(u1)
                    else:
                        u2 = perturbation.apply(u2)
                y1 = x[:, :n] @ c1_t
                y2 = x[:, n:] @ c2_t
                uu1 = np.einsum("ij,ij->i", u1, u1)
                uu2 = np.einsum("ij,ij->i", u2, u2)
                cost1 += w1 * (spec.Q1 * np.einsum("ij,ij->i", y1, y1) + spec.R11 * uu1 + eps * spec.R12 * uu2)
                cost2 += w1 * (spec.Q2 * np.einsum("ij,ij->i", y2, y2) + spec.R22 * uu2 + eps * spec.R21 * uu1)
                x = x + (x @ a_t + u1 @ b1_t + u2 @ b2_t) * dt + xi[:, j, :] @ noise_t
            cost1 += 0.5 * spec.Q1f * np.einsum("ij,ij->i", x[:, :n], x[:, :n]) / n
            cost2 += 0.5 * spec.Q2f * np.einsum("ij,ij->i", x[:, n:], x[:, n:]) / n
        return cost1, cost2, x

    starts = list(range(0, cfg.num_paths, BATCH_SIZE))
    threads = max(1, int(cfg.threads))
    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(run_batch, starts))
    else:
        parts = [run_batch(s) for s in starts]
    cost1 = np.concatenate([p[0] for p in parts])
    cost2 = np.concatenate([p[1] for p in parts])
    terminal = np.concatenate([p[2] for p in parts])
    flagged = ~(np.isfinite(cost1) & np.isfinite(cost2) & np.all(np.isfinite(terminal), axis=1))
    return PathResult(cost1, cost2, terminal, flagged)


def estimate_costs(asm: AssembledGame, solution: RiccatiSolution, cfg: PathConfig,
                   perturbation: Optional[StrategyPerturbation] = None):
    """Monte Carlo estimates of (J^1, J^2); overflowed paths are excluded."""
    res = simulate_closed_loop(asm, solution, cfg, perturbation)
    ok = ~res.flagged
    return CostEstimate.from_samples(res.cost1[ok]), CostEstimate.from_samples(res.cost2[ok])


def _paired(base: PathResult, pert: PathResult, team: int) -> CostEstimate:
    ok = ~(base.flagged | pert.flagged)
    if team == 1:
        diff = pert.cost1[ok] - base.cost1[ok]
    else:
        diff = pert.cost2[ok] - base.cost2[ok]
    return CostEstimate.from_samples(diff)


def deviation_test(asm: AssembledGame, solution: RiccatiSolution, cfg: PathConfig,
                   perturbation: StrategyPerturbation) -> CostEstimate:
    """Paired estimate of J^team(perturbed) - J^team(equilibrium) on common noise."""
    base = simulate_closed_loop(asm, solution, cfg)
    pert = simulate_closed_loop(asm, solution, cfg, perturbation)
    return _paired(base, pert, perturbation.team)


def deviation_battery(asm: AssembledGame, solution: RiccatiSolution, cfg: PathConfig,
                      perturbations) -> list[CostEstimate]:
    """deviation_test for several perturbations against one shared baseline run."""
    base = simulate_closed_loop(asm, solution, cfg)
    return [_paired(base, simulate_closed_loop(asm, solution, cfg, p), p.team)
            for p in perturbations]


def scale_battery(scales=(0.5, 0.9, 1.1, 1.5)) -> list[StrategyPerturbation]:
    return [StrategyPerturbation.scale(team, s) for team in (1, 2) for s in scales]


@dataclass(eq=False)
class WeakOrderResult:
    dts: tuple  # (4h, 2h, h)
    estimates: list  # per dt: (CostEstimate, CostEstimate)
    values: tuple  # analytic (J^1, J^2)
    ratios: tuple  # per team
    c_bias: tuple  # per team
    gaps: list = field(default_factory=list)  # per dt: (gap1, gap2)


def weak_order_check(asm: AssembledGame, solution: RiccatiSolution, cfg: PathConfig,
                     h: Optional[float] = None) -> WeakOrderResult:
    """Estimates at dt_sim in {4h, 2h, h} on one set of Brownian paths.

    Shared noise cancels most Monte Carlo error from successive differences,
    so (J(4h) - J(2h)) / (J(2h) - J(h)) isolates the discretization bias
    ratio (about 2 for weak order one) and |J(2h) - J(h)| / h estimates the
    bias constant at step h.
    """
    h = cfg.dt_sim if h is None else h
    dts = (4 * h, 2 * h, h)
    ests = []
    for d in dts:
        run = PathConfig(dt_sim=d, num_paths=cfg.num_paths, seed=cfg.seed,
                         modes_used=cfg.modes_used, noise_dt=h, threads=cfg.threads)
        ests.append(estimate_costs(asm, solution, run))
    values = value_at(solution, asm)
    ratios, c_bias = [], []
    for i in range(2):
        m = [e[i].mean for e in ests]
        d_coarse, d_fine = m[0] - m[1], m[1] - m[2]
        ratios.append(d_coarse / d_fine if d_fine != 0 else math.inf)
        c_bias.append(abs(d_fine) / h)
    gaps = [tuple(abs(e[i].mean - values[i]) for i in range(2)) for e in ests]
    return WeakOrderResult(dts, ests, values, tuple(ratios), tuple(c_bias), gaps)


def default_threads() -> int:
    try:
        return max(1, int(os.environ.get("GRAPHON_TEAMS_THREADS", "1")))
    except ValueError:
        return 1
