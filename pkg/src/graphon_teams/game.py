"""Game specification and the block operators on H^2 and H^4.

States are stacked as x = (x^1; x^2) in R^{2n}; the H^4 objects act on
R^{4n} and hold one H^2 operator per team on the diagonal.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from functools import cached_property
from typing import Union

import numpy as np

from .graphon import (Constant, GraphonSpec, Grid, StepFunction, discretize,
                      graphon_from_dict, spectral_norm)


class SpecError(ValueError):
    """GameSpec invariant violation; ``violations`` lists every failed check."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


@dataclass(frozen=True)
class NoiseSpec:
    """Cosine Karhunen-Loeve basis with geometric spectrum lambda0 * 2^-(k-1).

    e_1 = 1 and e_k = sqrt(2) cos((k-1) pi a) at the grid midpoints.  These
    are exactly orthonormal under the weighted inner product as long as
    ``num_modes <= n``.
    """

    lambda0: float = 1.0
    num_modes: int = 16

    def violations(self) -> list[str]:
        out = []
        if not self.lambda0 >= 0:
            out.append(f"lambda0 must be >= 0, got {self.lambda0}")
        if int(self.num_modes) != self.num_modes or self.num_modes < 0:
            out.append(f"num_modes must be a natural number, got {self.num_modes}")
        return out

    def eigenvalues(self) -> np.ndarray:
        return self.lambda0 * 0.5 ** np.arange(self.num_modes)

    def eigenfunctions(self, grid: Grid) -> np.ndarray:
        """Columns are the modes sampled at the midpoints, shape (n, K)."""
        if self.num_modes > grid.n:
            raise SpecError([f"num_modes={self.num_modes} exceeds grid n={grid.n}; "
                             "cosine modes alias beyond n"])
        k = np.arange(self.num_modes)
        e = np.sqrt(2.0) * np.cos(np.pi * np.outer(grid.midpoints, k))
        if self.num_modes:
            e[:, 0] = 1.0
        return e

    def to_dict(self) -> dict:
        return {"lambda0": self.lambda0, "num_modes": self.num_modes}


@dataclass(frozen=True)
class ConstantState:
    value: float = 0.0

    def sample(self, grid: Grid) -> np.ndarray:
        return np.full(grid.n, float(self.value))

    def to_dict(self) -> dict:
        return {"kind": "constant", "value": self.value}


@dataclass(frozen=True)
class StepState:
    partition: tuple[float, ...]
    values: tuple[float, ...]

    def sample(self, grid: Grid) -> np.ndarray:
        idx = np.clip(np.searchsorted(self.partition, grid.midpoints, side="right") - 1,
                      0, len(self.values) - 1)
        return np.asarray(self.values, dtype=float)[idx]

    def to_dict(self) -> dict:
        return {"kind": "step", "partition": list(self.partition), "values": list(self.values)}


@dataclass(frozen=True)
class CosineState:
    """mean + amplitude * cos(frequency * pi * a)."""

    mean: float = 0.0
    amplitude: float = 1.0
    frequency: float = 1.0

    def sample(self, grid: Grid) -> np.ndarray:
        return self.mean + self.amplitude * np.cos(self.frequency * np.pi * grid.midpoints)

    def to_dict(self) -> dict:
        return {"kind": "cosine", "mean": self.mean, "amplitude": self.amplitude,
                "frequency": self.frequency}


@dataclass(frozen=True)
class GridValues:
    """Explicit grid values; only valid on a grid of matching size."""

    values: tuple[float, ...]

    def sample(self, grid: Grid) -> np.ndarray:
        if len(self.values) != grid.n:
            raise SpecError([f"initial state has {len(self.values)} values, grid has n={grid.n}"])
        return np.asarray(self.values, dtype=float)

    def to_dict(self) -> dict:
        return {"kind": "values", "values": list(self.values)}


InitialState = Union[ConstantState, StepState, CosineState, GridValues]


def state_from_dict(d: dict) -> InitialState:
    kind = d.get("kind")
    if kind == "constant":
        return ConstantState(float(d.get("value", 0.0)))
    if kind == "step":
        return StepState(tuple(float(p) for p in d["partition"]), tuple(float(v) for v in d["values"]))
    if kind == "cosine":
        return CosineState(**{k: float(v) for k, v in d.items() if k != "kind"})
    if kind == "values":
        return GridValues(tuple(float(v) for v in d["values"]))
    raise SpecError([f"unknown initial state kind {kind!r}"])


SCALAR_FIELDS = ("A1", "A2", "B1", "B2", "D1", "D2", "F1", "F2", "sigma1", "sigma2",
                 "eps", "Gamma1", "Gamma2", "Q1", "Q2", "Q1f", "Q2f",
                 "R11", "R22", "R12", "R21", "T")


@dataclass(frozen=True)
class GameSpec:
    """Every model constant of the two-team game.

    ``Q1``/``Q2`` are the running state weights, ``Q1f``/``Q2f`` the terminal
    ones; ``R12`` is the weight of team 2's control in team 1's cost (scaled
    by ``eps``), and symmetrically for ``R21``.
    """

    A1: float = 0.2
    A2: float = -0.1
    B1: float = 1.0
    B2: float = 0.8
    D1: float = 0.5
    D2: float = 0.3
    F1: float = 0.4
    F2: float = -0.6
    sigma1: float = 0.3
    sigma2: float = 0.2
    eps: float = 0.1
    Gamma1: float = 0.5
    Gamma2: float = 0.4
    Q1: float = 1.0
    Q2: float = 2.0
    Q1f: float = 1.0
    Q2f: float = 0.5
    R11: float = 1.0
    R22: float = 1.5
    R12: float = 0.5
    R21: float = 0.3
    T: float = 1.0
    M1: GraphonSpec = field(default_factory=lambda: Constant(1.0))
    M2: GraphonSpec = field(default_factory=lambda: Constant(1.0))
    noise1: NoiseSpec = field(default_factory=NoiseSpec)
    noise2: NoiseSpec = field(default_factory=NoiseSpec)
    x0_1: InitialState = field(default_factory=lambda: ConstantState(1.0))
    x0_2: InitialState = field(default_factory=lambda: ConstantState(-0.5))

    def __post_init__(self):
        errors = self.violations()
        if errors:
            raise SpecError(errors)

    def violations(self) -> list[str]:
        out = []
        for name in SCALAR_FIELDS:
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, float)) or not np.isfinite(v):
                out.append(f"{name} must be a finite real number, got {v!r}")
        if out:
            return out
        for name in ("Q1", "Q2", "Q1f", "Q2f"):
            if getattr(self, name) < 0:
                out.append(f"{name} must satisfy {name} >= 0, got {getattr(self, name)}")
        for name in ("R11", "R22"):
            if getattr(self, name) <= 0:
                out.append(f"{name} must satisfy {name} > 0, got {getattr(self, name)}")
        if self.T <= 0:
            out.append(f"T must satisfy T > 0, got {self.T}")
        for name in ("noise1", "noise2"):
            out += [f"{name}: {msg}" for msg in getattr(self, name).violations()]
        return out

    def replace(self, **changes) -> "GameSpec":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = {name: getattr(self, name) for name in SCALAR_FIELDS}
        d["M1"] = self.M1.to_dict()
        d["M2"] = self.M2.to_dict()
        d["noise1"] = self.noise1.to_dict()
        d["noise2"] = self.noise2.to_dict()
        d["x0_1"] = self.x0_1.to_dict()
        d["x0_2"] = self.x0_2.to_dict()
        return d


def game_from_dict(d: dict) -> GameSpec:
    kw = {k: d[k] for k in SCALAR_FIELDS if k in d}
    for name in ("M1", "M2"):
        if name in d:
            kw[name] = graphon_from_dict(d[name])
    for name in ("noise1", "noise2"):
        if name in d:
            kw[name] = NoiseSpec(**d[name])
    for name in ("x0_1", "x0_2"):
        if name in d:
            kw[name] = state_from_dict(d[name])
    return GameSpec(**kw)


def _frozen(m: np.ndarray) -> np.ndarray:
    m = np.ascontiguousarray(m, dtype=float)
    m.setflags(write=False)
    return m


def _direct_sum(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = np.zeros((a.shape[0] + b.shape[0], a.shape[1] + b.shape[1]))
    out[:a.shape[0], :a.shape[1]] = a
    out[a.shape[0]:, a.shape[1]:] = b
    return out


def assemble_cost_blocks(spec: GameSpec, grid: Grid):
    """Running and terminal cost operators (Q1_blk, Q2_blk, G1_blk, G2_blk) on H^2."""
    n = grid.n
    eye = np.eye(n)
    zero = np.zeros((n, n))
    c1 = eye - spec.Gamma1 * discretize(spec.M1, grid).entries
    c2 = eye - spec.Gamma2 * discretize(spec.M2, grid).entries
    # square as an operator product so PSD holds exactly at the discrete level
    q1 = _direct_sum(0.5 * spec.Q1 * (c1.T @ c1), zero)
    q2 = _direct_sum(zero, 0.5 * spec.Q2 * (c2.T @ c2))
    g1 = _direct_sum(0.5 * spec.Q1f * eye, zero)
    g2 = _direct_sum(zero, 0.5 * spec.Q2f * eye)
    return _frozen(q1), _frozen(q2), _frozen(g1), _frozen(g2)


@dataclass(frozen=True, eq=False)
class AssembledGame:
    spec: GameSpec
    grid: Grid
    A_eps: np.ndarray
    B1_map: np.ndarray
    B2_map: np.ndarray
    Sigma: np.ndarray
    Q1_blk: np.ndarray
    Q2_blk: np.ndarray
    G1_blk: np.ndarray
    G2_blk: np.ndarray
    cost_map1: np.ndarray  # I - Gamma1 M1 on H
    cost_map2: np.ndarray
    noise_eigenvalues: np.ndarray  # (K1 + K2,)
    noise_modes: np.ndarray  # (2n, K1 + K2) H^2 embeddings, columns
    noise_team: np.ndarray  # 1 or 2 per column
    x0: np.ndarray  # (2n,)

    @property
    def n(self) -> int:
        return self.grid.n

    @cached_property
    def BB1(self) -> np.ndarray:
        return _frozen(self.B1_map @ self.B1_map.T)

    @cached_property
    def BB2(self) -> np.ndarray:
        return _frozen(self.B2_map @ self.B2_map.T)

    @cached_property
    def S1(self) -> np.ndarray:
        """(2/R11) B1 B1*."""
        return _frozen(2.0 / self.spec.R11 * self.BB1)

    @cached_property
    def S2(self) -> np.ndarray:
        return _frozen(2.0 / self.spec.R22 * self.BB2)

    @cached_property
    def S0_1(self) -> np.ndarray:
        """(2 R12 / R22^2) B2 B2*: the opponent-control weight in team 1's equation."""
        return _frozen(2.0 * self.spec.R12 / self.spec.R22 ** 2 * self.BB2)

    @cached_property
    def S0_2(self) -> np.ndarray:
        return _frozen(2.0 * self.spec.R21 / self.spec.R11 ** 2 * self.BB1)

    def quad(self, m: np.ndarray, x: np.ndarray) -> float:
        """Weighted quadratic form <m x, x>."""
        return float(x @ m @ x) / self.n


def _cross_block(grid: Grid) -> np.ndarray:
    return discretize(Constant(1.0), grid).entries


def assemble(spec: GameSpec, grid: Grid) -> AssembledGame:
    n = grid.n
    eye = np.eye(n)
    m1 = discretize(spec.M1, grid).entries
    m2 = discretize(spec.M2, grid).entries
    mbar = _cross_block(grid)
    a = np.zeros((2 * n, 2 * n))
    a[:n, :n] = spec.A1 * eye + spec.D1 * m1
    a[n:, n:] = spec.A2 * eye + spec.D2 * m2
    a[:n, n:] = spec.eps * spec.F1 * mbar
    a[n:, :n] = spec.eps * spec.F2 * mbar
    b1 = np.vstack([spec.B1 * eye, np.zeros((n, n))])
    b2 = np.vstack([np.zeros((n, n)), spec.B2 * eye])
    sigma = np.diag(np.r_[np.full(n, float(spec.sigma1)), np.full(n, float(spec.sigma2))])
    q1, q2, g1, g2 = assemble_cost_blocks(spec, grid)

    e1 = spec.noise1.eigenfunctions(grid)
    e2 = spec.noise2.eigenfunctions(grid)
    k1, k2 = e1.shape[1], e2.shape[1]
    modes = np.zeros((2 * n, k1 + k2))
    modes[:n, :k1] = e1
    modes[n:, k1:] = e2
    lams = np.r_[spec.noise1.eigenvalues(), spec.noise2.eigenvalues()]
    team = np.r_[np.ones(k1, dtype=int), np.full(k2, 2, dtype=int)]
    x0 = np.r_[spec.x0_1.sample(grid), spec.x0_2.sample(grid)]

    return AssembledGame(
        spec=spec, grid=grid, A_eps=_frozen(a), B1_map=_frozen(b1), B2_map=_frozen(b2),
        Sigma=_frozen(sigma), Q1_blk=q1, Q2_blk=q2, G1_blk=g1, G2_blk=g2,
        cost_map1=_frozen(eye - spec.Gamma1 * m1), cost_map2=_frozen(eye - spec.Gamma2 * m2),
        noise_eigenvalues=_frozen(lams), noise_modes=_frozen(modes),
        noise_team=team, x0=_frozen(x0),
    )


def coupling_direction(grid: Grid, spec: GameSpec) -> np.ndarray:
    """The fixed matrix C with A_eps = A_0 + eps * C."""
    n = grid.n
    mbar = _cross_block(grid)
    c = np.zeros((2 * n, 2 * n))
    c[:n, n:] = spec.F1 * mbar
    c[n:, :n] = spec.F2 * mbar
    return c


@dataclass(frozen=True, eq=False)
class H4Operators:
    K: np.ndarray
    S: np.ndarray
    S0: np.ndarray
    J: np.ndarray
    Qbar: np.ndarray
    G: np.ndarray


def h4_operators(asm: AssembledGame) -> H4Operators:
    """K_eps, S, S0, J, Qbar, G as 4n x 4n matrices."""
    m = 2 * asm.n
    swap = np.zeros((2 * m, 2 * m))
    swap[:m, m:] = np.eye(m)
    swap[m:, :m] = np.eye(m)
    return H4Operators(
        K=_frozen(_direct_sum(asm.A_eps, asm.A_eps)),
        S=_frozen(_direct_sum(asm.S1, asm.S2)),
        S0=_frozen(_direct_sum(asm.S0_1, asm.S0_2)),
        J=_frozen(swap),
        Qbar=_frozen(_direct_sum(asm.Q1_blk, asm.Q2_blk)),
        G=_frozen(_direct_sum(asm.G1_blk, asm.G2_blk)),
    )


@dataclass(frozen=True)
class H4Norms:
    K: float
    S: float
    S0: float
    J: float
    Qbar: float
    G: float


def h4_operator_norms(asm: AssembledGame) -> H4Norms:
    """Spectral norms of the H^4 operators entering the local-existence constants."""
    ops = h4_operators(asm)
    return H4Norms(*(spectral_norm(getattr(ops, f)) for f in ("K", "S", "S0", "J", "Qbar", "G")))


def block_average_maps(k_blocks: int, grid: Grid):
    """(restrict, lift) between n-cell grid functions and k equal-block functions."""
    n = grid.n
    if n % k_blocks:
        raise ValueError(f"grid n={n} is not a multiple of {k_blocks}")
    m = n // k_blocks
    lift = np.kron(np.eye(k_blocks), np.ones((m, 1)))
    restrict = lift.T / m
    return restrict, lift
