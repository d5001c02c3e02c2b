"""Graphon kernels on [0,1]^2 and their midpoint discretization.

Grid functions live on a uniform grid of n cells with midpoints
alpha_i = (i - 1/2)/n.  The inner product is the weighted one,
<u, v> = (1/n) sum_i u_i v_i, so the matrix transpose realizes the adjoint.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Union

import numpy as np


class DomainError(ValueError):
    """Argument outside the domain of an operation."""


class GraphonError(ValueError):
    """Invalid graphon specification."""


_KERNEL_TOL = 1e-12


@dataclass(frozen=True)
class Constant:
    c: float

    def __post_init__(self):
        if not abs(self.c) <= 1.0:
            raise GraphonError(f"constant graphon value must lie in [-1, 1], got {self.c}")

    def __call__(self, a, b):
        return np.full(np.broadcast(np.asarray(a), np.asarray(b)).shape, float(self.c))[()]

    def to_dict(self) -> dict:
        return {"kind": "constant", "c": self.c}


@dataclass(frozen=True)
class StepFunction:
    """Piecewise-constant kernel: ``values[p][q]`` on cell p x cell q."""

    partition: tuple[float, ...]
    values: tuple[tuple[float, ...], ...]

    def __post_init__(self):
        object.__setattr__(self, "partition", tuple(float(p) for p in self.partition))
        object.__setattr__(self, "values", tuple(tuple(float(v) for v in row) for row in self.values))
        errors = self.violations()
        if errors:
            raise GraphonError("; ".join(errors))

    def violations(self) -> list[str]:
        p = self.partition
        k = len(p) - 1
        out = []
        if k < 1:
            out.append("step partition needs at least two breakpoints")
            return out
        if p[0] != 0.0 or p[-1] != 1.0:
            out.append("step partition must start at 0 and end at 1")
        if any(b <= a for a, b in zip(p[:-1], p[1:])):
            out.append("step partition must be strictly increasing")
        if len(self.values) != k or any(len(row) != k for row in self.values):
            out.append(f"step values must be a {k}x{k} matrix")
            return out
        vals = np.array(self.values)
        if not np.array_equal(vals, vals.T):
            out.append("step values must be symmetric")
        if np.any(np.abs(vals) > 1.0):
            out.append("step values must lie in [-1, 1]")
        return out

    def cell_index(self, a):
        # right-closed last cell so that 1.0 belongs to cell k-1
        idx = np.searchsorted(self.partition, np.asarray(a, dtype=float), side="right") - 1
        return np.clip(idx, 0, len(self.partition) - 2)

    def __call__(self, a, b):
        vals = np.array(self.values)
        return vals[self.cell_index(a), self.cell_index(b)][()]

    def to_dict(self) -> dict:
        return {"kind": "step", "partition": list(self.partition),
                "values": [list(row) for row in self.values]}


_CATALOG = {
    "min": lambda a, b: np.minimum(a, b),
    "product": lambda a, b: a * b,
    "cosine": lambda a, b: np.cos(np.pi * (a - b)),
}


@dataclass(frozen=True)
class NamedAnalytic:
    """One of the catalog kernels: ``min``, ``product`` or ``cosine`` (cos(pi(a-b)))."""

    name: str

    def __post_init__(self):
        if self.name not in _CATALOG:
            raise GraphonError(f"unknown graphon {self.name!r}; expected one of {sorted(_CATALOG)}")

    def __call__(self, a, b):
        return _CATALOG[self.name](np.asarray(a, dtype=float), np.asarray(b, dtype=float))[()]

    def to_dict(self) -> dict:
        return {"kind": "named", "name": self.name}


GraphonSpec = Union[Constant, StepFunction, NamedAnalytic]


def graphon_from_dict(d: dict) -> GraphonSpec:
    kind = d.get("kind")
    if kind == "constant":
        return Constant(float(d["c"]))
    if kind == "step":
        return StepFunction(tuple(d["partition"]), tuple(tuple(r) for r in d["values"]))
    if kind == "named":
        return NamedAnalytic(str(d["name"]))
    raise GraphonError(f"unknown graphon kind {kind!r}")


@dataclass(frozen=True)
class Grid:
    n: int

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 1:
            raise ValueError(f"grid needs n >= 1 cells, got {self.n}")

    @cached_property
    def midpoints(self) -> np.ndarray:
        return (np.arange(self.n) + 0.5) / self.n

    @property
    def cell_weight(self) -> float:
        return 1.0 / self.n

    def inner(self, u, v) -> float:
        return float(np.dot(u, v)) / self.n

    def norm(self, u) -> float:
        return math.sqrt(self.inner(u, u))


@dataclass(frozen=True, eq=False)
class DiscretizedOperator:
    """Matrix acting on grid functions; ``entries[i, j] = M(a_i, a_j) / n``."""

    entries: np.ndarray
    grid: Grid

    def __matmul__(self, v):
        return apply(self, v)


def evaluate_kernel(spec: GraphonSpec, a: float, b: float) -> float:
    if not (0.0 <= a <= 1.0 and 0.0 <= b <= 1.0):
        raise DomainError(f"kernel arguments must lie in [0, 1], got ({a}, {b})")
    return float(spec(a, b))


def discretize(spec: GraphonSpec, grid: Grid) -> DiscretizedOperator:
    a = grid.midpoints
    vals = np.asarray(spec(a[:, None], a[None, :]), dtype=float)
    vals = np.broadcast_to(vals, (grid.n, grid.n))
    # symmetric by construction even if the evaluator rounds asymmetrically
    upper = np.triu(vals)
    vals = upper + np.triu(vals, 1).T
    entries = vals / grid.n
    entries.setflags(write=False)
    return DiscretizedOperator(entries, grid)


def apply(op: DiscretizedOperator, v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.shape[0] != op.grid.n:
        raise ValueError(f"grid function has length {v.shape[0]}, operator expects {op.grid.n}")
    return op.entries @ v


def operator_norm(op: DiscretizedOperator | np.ndarray) -> float:
    """Largest absolute eigenvalue of a self-adjoint discretized operator."""
    m = op.entries if isinstance(op, DiscretizedOperator) else np.asarray(op, dtype=float)
    if m.size == 0:
        return 0.0
    scale = max(np.abs(m).max(), 1.0)
    if not np.allclose(m, m.T, rtol=0.0, atol=_KERNEL_TOL * scale):
        raise ValueError("operator_norm requires a self-adjoint operator")
    return float(np.abs(np.linalg.eigvalsh(m)).max())


def spectral_norm(m: np.ndarray) -> float:
    """Operator 2-norm of any matrix under the uniform weighted inner product."""
    m = np.asarray(m, dtype=float)
    if m.size == 0:
        return 0.0
    if np.array_equal(m, m.T):
        return float(np.abs(np.linalg.eigvalsh(m)).max())
    return float(np.linalg.norm(m, 2))
