"""Backward integration of the coupled operator Riccati system.

All Riccati right-hand sides below are written as F(t, P) = -dP/dt, so a
backward RK4 step from t_{k+1} to t_k reads P_k = P_{k+1} + h/6 (F1 + 2F2 + 2F3 + F4).
Norm escape is a reported outcome (``escape_time``), never a silent NaN.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .game import AssembledGame, GameSpec, assemble, h4_operator_norms, h4_operators
from .graphon import Grid, spectral_norm


class InternalConsistencyError(RuntimeError):
    """A structural property that must hold exactly was violated."""


class EscapedSolutionError(RuntimeError):
    """The requested quantity needs a solution that reached t = 0."""


@dataclass(frozen=True)
class SolverConfig:
    dt: float = 1e-3
    symmetrize: bool = True
    blowup_threshold: float = 1e8
    method: str = "rk4"

    def violations(self) -> list[str]:
        out = []
        if not self.dt > 0:
            out.append(f"dt must be > 0, got {self.dt}")
        if not self.blowup_threshold > 0:
            out.append(f"blowup_threshold must be > 0, got {self.blowup_threshold}")
        if self.method != "rk4":
            out.append(f"method is fixed to 'rk4', got {self.method!r}")
        return out

    def __post_init__(self):
        errors = self.violations()
        if errors:
            raise ValueError("; ".join(errors))


def time_grid(T: float, dt: float) -> np.ndarray:
    steps = int(round(T / dt))
    if steps < 1 or abs(steps * dt - T) > 1e-9 * max(T, 1.0):
        raise ValueError(f"dt={dt} does not divide T={T}")
    return np.linspace(0.0, T, steps + 1)


@dataclass(eq=False)
class Trajectory:
    """Matrix-valued function on a time grid; nodes below an escape hold NaN."""

    times: np.ndarray
    values: np.ndarray
    escape_time: Optional[float] = None

    @property
    def complete(self) -> bool:
        return self.escape_time is None


@dataclass(eq=False)
class RiccatiSolution:
    times: np.ndarray
    Pi1: np.ndarray
    Pi2: np.ndarray
    q1: np.ndarray
    q2: np.ndarray
    escape_time: Optional[float] = None
    offdiag_norms: Optional[np.ndarray] = None

    @property
    def status(self) -> str:
        return "complete" if self.escape_time is None else "escaped"

    @property
    def complete(self) -> bool:
        return self.escape_time is None

    def min_eigenvalues(self) -> tuple[np.ndarray, np.ndarray]:
        """Smallest eigenvalue of each Pi^i per node (sign is not guaranteed)."""
        out = []
        for pi in (self.Pi1, self.Pi2):
            vals = np.full(len(self.times), np.nan)
            ok = np.all(np.isfinite(pi), axis=(1, 2))
            if ok.any():
                vals[ok] = np.linalg.eigvalsh(pi[ok])[:, 0]
            out.append(vals)
        return out[0], out[1]

    def spectral_norms(self) -> tuple[np.ndarray, np.ndarray]:
        out = []
        for pi in (self.Pi1, self.Pi2):
            vals = np.full(len(self.times), np.nan)
            ok = np.all(np.isfinite(pi), axis=(1, 2))
            if ok.any():
                vals[ok] = np.abs(np.linalg.eigvalsh(pi[ok])).max(axis=1)
            out.append(vals)
        return out[0], out[1]


def _sym(x: np.ndarray) -> np.ndarray:
    return 0.5 * (x + np.swapaxes(x, -1, -2))


def _escaped(x: np.ndarray, threshold: float) -> bool:
    if not np.all(np.isfinite(x)):
        return True
    # Frobenius bounds the spectral norm from above; only refine when it trips
    if np.sqrt(np.sum(x * x, axis=(-2, -1))).max() <= threshold:
        return False
    mats = x.reshape((-1,) + x.shape[-2:])
    return max(spectral_norm(m) for m in mats) > threshold


def integrate_backward(rhs: Callable[[float, np.ndarray], np.ndarray], terminal: np.ndarray,
                       times: np.ndarray, cfg: SolverConfig,
                       on_node: Optional[Callable[[int, np.ndarray], None]] = None):
    """Classical RK4 from times[-1] down to times[0].

    ``rhs(t, X)`` returns -dX/dt.  Returns (states, escape_time) where states
    has shape (len(times),) + terminal.shape and holds NaN below the escape.
    """
    n_nodes = len(times)
    states = np.full((n_nodes,) + terminal.shape, np.nan)
    x = np.array(terminal, dtype=float)
    states[-1] = x
    if on_node is not None:
        on_node(n_nodes - 1, x)
    for k in range(n_nodes - 2, -1, -1):
        t1, t0 = times[k + 1], times[k]
        h = t1 - t0
        tm = t1 - 0.5 * h
        f1 = rhs(t1, x)
        f2 = rhs(tm, x + 0.5 * h * f1)
        f3 = rhs(tm, x + 0.5 * h * f2)
        f4 = rhs(t0, x + h * f3)
        x = x + (h / 6.0) * (f1 + 2.0 * f2 + 2.0 * f3 + f4)
        if cfg.symmetrize:
            x = _sym(x)
        if _escaped(x, cfg.blowup_threshold):
            return states, float(t0)
        states[k] = x
        if on_node is not None:
            on_node(k, x)
    return states, None


def coupled_rhs(asm: AssembledGame) -> Callable[[float, np.ndarray], np.ndarray]:
    """-d/dt of the stacked pair (Pi^1, Pi^2), shape (2, 2n, 2n)."""
    a = asm.A_eps
    s = np.stack([asm.S1, asm.S2])
    e0 = asm.spec.eps * np.stack([asm.S0_1, asm.S0_2])
    q = np.stack([asm.Q1_blk, asm.Q2_blk])

    def tr(m):
        return np.swapaxes(m, -1, -2)

    # both teams at once; symmetric Pi and S give (Pi A)* = A* Pi and (Pi S)* = S Pi
    def rhs(t, x):
        xa = x @ a
        u = x @ s  # (Pi1 S1, Pi2 S2)
        cross = x @ tr(u[::-1])  # (Pi1 S2 Pi2, Pi2 S1 Pi1)
        opp = x[::-1]
        return xa + tr(xa) - u @ x - (cross + tr(cross)) + opp @ e0 @ opp + q

    return rhs


def compute_q(solution: RiccatiSolution, asm: AssembledGame) -> tuple[np.ndarray, np.ndarray]:
    """q^i(t) = int_t^T tr[Pi^i Sigma Q Sigma*] ds by the trapezoid rule.

    The trace is taken through the noise modes,
    sum_k lambda_k <Pi Sigma e_k, Sigma e_k>.
    """
    v = asm.Sigma @ asm.noise_modes
    lam = asm.noise_eigenvalues
    dt = np.diff(solution.times)
    out = []
    for pi in (solution.Pi1, solution.Pi2):
        if v.shape[1] == 0:
            tr = np.zeros(len(solution.times))
        else:
            tr = np.einsum("tik,ik,k->t", pi @ v, v, lam) / asm.n
        q = np.zeros(len(solution.times))
        # backward cumulative trapezoid; NaN propagates below an escape
        q[:-1] = np.cumsum((0.5 * dt * (tr[:-1] + tr[1:]))[::-1])[::-1]
        out.append(q)
    return out[0], out[1]


def solve_coupled(asm: AssembledGame, cfg: SolverConfig) -> RiccatiSolution:
    times = time_grid(asm.spec.T, cfg.dt)
    terminal = np.stack([asm.G1_blk, asm.G2_blk])
    states, t_esc = integrate_backward(coupled_rhs(asm), terminal, times, cfg)
    # terminal node is the assembled G block bitwise
    states[-1, 0] = asm.G1_blk
    states[-1, 1] = asm.G2_blk
    sol = RiccatiSolution(times, states[:, 0], states[:, 1],
                          np.zeros(len(times)), np.zeros(len(times)), t_esc)
    sol.q1, sol.q2 = compute_q(sol, asm)
    return sol


def decoupled_rhs(asm: AssembledGame, team: int):
    spec, n = asm.spec, asm.n
    sl = slice(0, n) if team == 1 else slice(n, 2 * n)
    a = asm.A_eps[sl, sl]  # eps only enters the cross blocks
    b, r = (spec.B1, spec.R11) if team == 1 else (spec.B2, spec.R22)
    quad = 2.0 * b * b / r
    q = (asm.Q1_blk if team == 1 else asm.Q2_blk)[sl, sl]

    def rhs(t, p):
        pa = p @ a  # a is symmetric here, so (p a)* = a p
        return pa + pa.T - quad * (p @ p) + q

    return rhs


def solve_decoupled(asm: AssembledGame, cfg: SolverConfig, team: int) -> Trajectory:
    """The team's own LQ Riccati equation on H when the teams do not interact."""
    if team not in (1, 2):
        raise ValueError(f"team must be 1 or 2, got {team}")
    n = asm.n
    sl = slice(0, n) if team == 1 else slice(n, 2 * n)
    times = time_grid(asm.spec.T, cfg.dt)
    g = (asm.G1_blk if team == 1 else asm.G2_blk)[sl, sl]
    states, t_esc = integrate_backward(decoupled_rhs(asm, team), g, times, cfg)
    return Trajectory(times, states, t_esc)


def embed_team(block: np.ndarray, team: int) -> np.ndarray:
    """Embed per-node n x n matrices as the team's diagonal block of H^2."""
    n = block.shape[-1]
    out = np.zeros(block.shape[:-2] + (2 * n, 2 * n))
    sl = slice(0, n) if team == 1 else slice(n, 2 * n)
    out[..., sl, sl] = block
    return out


def relative_sup_error(x: np.ndarray, ref: np.ndarray) -> float:
    """sup_t ||x(t) - ref(t)||_F / sup_t ||ref(t)||_F (absolute if ref vanishes)."""
    diff = np.sqrt(np.sum((x - ref) ** 2, axis=(-2, -1))).max()
    scale = np.sqrt(np.sum(ref ** 2, axis=(-2, -1))).max()
    return float(diff / scale) if scale > 0 else float(diff)


def _interp_index(times: np.ndarray, t: float) -> tuple[int, float]:
    if not (times[0] - 1e-12 <= t <= times[-1] + 1e-12):
        raise ValueError(f"t={t} outside [{times[0]}, {times[-1]}]")
    k = int(np.clip(np.searchsorted(times, t, side="right") - 1, 0, len(times) - 2))
    w = (t - times[k]) / (times[k + 1] - times[k])
    return k, float(np.clip(w, 0.0, 1.0))


def feedback_gain(solution: RiccatiSolution, asm: AssembledGame, t: float):
    """(K^1(t), K^2(t)) with u^i = K^i x, each n x 2n; linear in t between nodes."""
    if not solution.complete:
        raise EscapedSolutionError("feedback gains need a complete solution")
    if len(solution.times) == 1:
        p1, p2 = solution.Pi1[0], solution.Pi2[0]
    else:
        k, w = _interp_index(solution.times, t)
        p1 = (1 - w) * solution.Pi1[k] + w * solution.Pi1[k + 1]
        p2 = (1 - w) * solution.Pi2[k] + w * solution.Pi2[k + 1]
    k1 = -(2.0 / asm.spec.R11) * asm.B1_map.T @ p1
    k2 = -(2.0 / asm.spec.R22) * asm.B2_map.T @ p2
    return k1, k2


class _CubicNodeInterpolant:
    """Local 4-point Lagrange interpolation of node values, exact at nodes."""

    def __init__(self, times, values):
        self.times = times
        self.values = values
        self.h = times[1] - times[0] if len(times) > 1 else 1.0

    def __call__(self, t):
        times, n = self.times, len(self.times)
        k = int(np.clip(np.searchsorted(times, t, side="right") - 1, 0, n - 1))
        if abs(t - times[k]) <= 1e-9 * self.h:
            return self.values[k]
        if k + 1 < n and abs(t - times[k + 1]) <= 1e-9 * self.h:
            return self.values[k + 1]
        if n < 4:
            k = min(k, n - 2)
            w = (t - times[k]) / (times[k + 1] - times[k])
            return (1 - w) * self.values[k] + w * self.values[k + 1]
        lo = int(np.clip(k - 1, 0, n - 4))
        idx = range(lo, lo + 4)
        out = 0.0
        for j in idx:
            wj = 1.0
            for m in idx:
                if m != j:
                    wj *= (t - times[m]) / (times[j] - times[m])
            out = out + wj * self.values[j]
        return out


def best_response_riccati(asm: AssembledGame, cfg: SolverConfig, opponent, team: int = 1) -> Trajectory:
    """Riccati equation of one team's LQ problem against the other's fixed feedback.

    ``opponent`` is the other team's Pi trajectory (a Trajectory or an array
    of per-node matrices on the same time grid).  The opponent's feedback
    shifts the drift and its control cost enters the state weight; the
    fixed point of this map is the Nash pair.
    """
    if team not in (1, 2):
        raise ValueError(f"team must be 1 or 2, got {team}")
    times = time_grid(asm.spec.T, cfg.dt)
    values = opponent.values if isinstance(opponent, Trajectory) else np.asarray(opponent)
    if values.shape[0] != len(times):
        raise ValueError("opponent trajectory is not on the solver's time grid")
    if not np.all(np.isfinite(values)):
        raise EscapedSolutionError("opponent trajectory is incomplete")
    eps = asm.spec.eps
    a = asm.A_eps
    if team == 1:
        own_s, opp_s, opp_cost, q, g = asm.S1, asm.S2, eps * asm.S0_1, asm.Q1_blk, asm.G1_blk
    else:
        own_s, opp_s, opp_cost, q, g = asm.S2, asm.S1, eps * asm.S0_2, asm.Q2_blk, asm.G2_blk
    opp = _CubicNodeInterpolant(times, values)

    def rhs(t, p):
        po = opp(t)
        a_t = a - opp_s @ po
        q_t = q + po @ opp_cost @ po
        return p @ a_t + a_t.T @ p - p @ own_s @ p + q_t

    states, t_esc = integrate_backward(rhs, np.array(g), times, cfg)
    states[-1] = g
    return Trajectory(times, states, t_esc)


@dataclass(frozen=True)
class ExistenceBound:
    r: float
    alpha: float
    tau: float
    c1: float
    c2: float
    degenerate: bool = False
    norms: Optional[object] = None

    @property
    def certified(self) -> bool:
        return self.tau > 0


def existence_bound(asm: AssembledGame, alpha: float) -> ExistenceBound:
    """Radius r and window tau of the local existence ball around the terminal data.

    Evaluated with ||K_eps|| at the spec's own eps.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    nm = h4_operator_norms(asm)
    return existence_bound_from_norms(nm.G, nm.K, nm.S, nm.S0, nm.Qbar, nm.J, alpha, norms=nm)


def existence_bound_from_norms(g, k, s, s0, qbar, j, alpha, norms=None) -> ExistenceBound:
    r = 2.0 * g
    c1 = 2 * r * k + r * r * s + 2 * r * r * j ** 2 * s + r * r * j ** 4 * s0 + qbar
    c2 = 2 * k + 2 * r * s + 4 * r * j ** 2 * s + 2 * r * j ** 4 * s0
    if g == 0 and qbar == 0:
        return ExistenceBound(r, alpha, math.inf, c1, c2, degenerate=True, norms=norms)
    tau1 = g / c1 if c1 > 0 else math.inf
    tau2 = alpha / c2 if c2 > 0 else math.inf
    return ExistenceBound(r, alpha, min(tau1, tau2), c1, c2, norms=norms)


@dataclass(frozen=True)
class WindowCheck:
    bound: ExistenceBound
    sup_norm: float
    nodes_checked: int

    @property
    def ok(self) -> bool:
        return self.bound.tau > 0 and self.sup_norm <= self.bound.r


def certified_window_check(asm: AssembledGame, cfg: SolverConfig, alpha: float,
                           solution: Optional[RiccatiSolution] = None,
                           window_steps: int = 64) -> WindowCheck:
    """Largest H^4 norm of the solution on [T - tau, T] against the radius r.

    The coefficients are time-invariant, so the window is also resolved by a
    dedicated solve over a horizon of length tau with ``window_steps`` steps.
    """
    bound = existence_bound(asm, alpha)
    if bound.degenerate or bound.tau == 0:
        return WindowCheck(bound, 0.0 if bound.degenerate else math.nan, 0)
    norms = []
    tau = min(bound.tau, asm.spec.T)
    if solution is not None:
        inside = solution.times >= asm.spec.T - tau - 1e-15
        n1, n2 = (x[inside] for x in solution.spectral_norms())
        norms += list(np.maximum(n1, n2))
    window = assemble(asm.spec.replace(T=tau), asm.grid)
    wsol = solve_coupled(window, dataclasses.replace(cfg, dt=tau / window_steps))
    if not wsol.complete:
        return WindowCheck(bound, math.inf, len(norms))
    n1, n2 = wsol.spectral_norms()
    norms += list(np.maximum(n1, n2))
    return WindowCheck(bound, float(max(norms)), len(norms))


def block_form_rhs(asm: AssembledGame):
    ops = h4_operators(asm)
    k, kt, s, s0, j, qbar = ops.K, ops.K.T, ops.S, ops.S0, ops.J, ops.Qbar
    eps = asm.spec.eps

    def rhs(t, p):
        jpj = j @ p @ j
        return (p @ k + kt @ p - p @ s @ p - p @ j @ s @ p @ j - j @ p @ s @ j @ p
                + eps * jpj @ s0 @ jpj + qbar)

    return rhs, ops


def solve_block_form(asm: AssembledGame, cfg: SolverConfig, offdiag_tol: float = 1e-10) -> RiccatiSolution:
    """Integrate the single 4n x 4n equation and keep its two diagonal blocks.

    The flow preserves block-diagonal operators, so the off-diagonal blocks
    must stay at zero; growth beyond ``offdiag_tol`` is an assembly bug.
    """
    m = 2 * asm.n
    times = time_grid(asm.spec.T, cfg.dt)
    rhs, ops = block_form_rhs(asm)
    pi1 = np.full((len(times), m, m), np.nan)
    pi2 = np.full((len(times), m, m), np.nan)
    off = np.full(len(times), np.nan)

    def on_node(k, x):
        pi1[k] = x[:m, :m]
        pi2[k] = x[m:, m:]
        # Frobenius bounds the operator norm from above
        off[k] = max(np.linalg.norm(x[:m, m:]), np.linalg.norm(x[m:, :m]))
        if off[k] > offdiag_tol:
            raise InternalConsistencyError(
                f"off-diagonal block norm {off[k]:.3e} at t={times[k]} exceeds {offdiag_tol}")

    _, t_esc = integrate_backward(rhs, np.array(ops.G), times, cfg, on_node=on_node)
    sol = RiccatiSolution(times, pi1, pi2, np.zeros(len(times)), np.zeros(len(times)),
                          t_esc, offdiag_norms=off)
    sol.q1, sol.q2 = compute_q(sol, asm)
    return sol


def value_at(solution: RiccatiSolution, asm: AssembledGame, x0: Optional[np.ndarray] = None):
    """Equilibrium costs (<Pi^1(0) x0, x0> + q^1(0), <Pi^2(0) x0, x0> + q^2(0))."""
    if not solution.complete:
        raise EscapedSolutionError(f"solution escaped at t={solution.escape_time}")
    x0 = asm.x0 if x0 is None else np.asarray(x0, dtype=float)
    return (asm.quad(solution.Pi1[0], x0) + float(solution.q1[0]),
            asm.quad(solution.Pi2[0], x0) + float(solution.q2[0]))


@dataclass(frozen=True)
class ContinuationStep:
    eps: float
    status: str
    escape_time: Optional[float]
    sup_diff: float  # sup_t max_i ||Pi^i_eps(t) - Pi^i_0(t)||_2


@dataclass(eq=False)
class ContinuationResult:
    solution: RiccatiSolution
    achieved_eps: float
    base: RiccatiSolution
    decoupling_error: float
    steps: list = field(default_factory=list)

    @property
    def reached_target(self) -> bool:
        return all(s.status == "complete" for s in self.steps)


def sup_difference(a: RiccatiSolution, b: RiccatiSolution) -> float:
    d1 = np.linalg.norm(a.Pi1 - b.Pi1, ord=2, axis=(1, 2))
    d2 = np.linalg.norm(a.Pi2 - b.Pi2, ord=2, axis=(1, 2))
    return float(max(d1.max(), d2.max()))


def solve_decoupled_pair(asm: AssembledGame, cfg: SolverConfig):
    """Embedded decoupled solutions (Pi^1, Pi^2) on H^2."""
    d1 = solve_decoupled(asm, cfg, 1)
    d2 = solve_decoupled(asm, cfg, 2)
    return embed_team(d1.values, 1), embed_team(d2.values, 2)


def epsilon_continuation(spec: GameSpec, grid: Grid, cfg: SolverConfig,
                         eps_target: float, steps: int) -> ContinuationResult:
    """Re-solve at eps_j = j * eps_target / steps, stopping at the first escape.

    Each solve is an independent cold start: terminal data, not an initial
    guess, fixes the backward flow.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    asm0 = assemble(spec.replace(eps=0.0), grid)
    base = solve_coupled(asm0, cfg)
    e1, e2 = solve_decoupled_pair(asm0, cfg)
    dec_err = max(relative_sup_error(base.Pi1, e1), relative_sup_error(base.Pi2, e2))
    result = ContinuationResult(base, 0.0, base, dec_err)
    if eps_target == 0:
        return result
    for j in range(1, steps + 1):
        eps_j = j * eps_target / steps
        sol = solve_coupled(assemble(spec.replace(eps=eps_j), grid), cfg)
        if not sol.complete:
            result.steps.append(ContinuationStep(eps_j, "escaped", sol.escape_time, math.nan))
            break
        result.steps.append(ContinuationStep(eps_j, "complete", None, sup_difference(sol, base)))
        result.solution, result.achieved_eps = sol, eps_j
    return result
