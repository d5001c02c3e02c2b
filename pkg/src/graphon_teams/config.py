"""Experiment configuration files (YAML) with strict, all-violations parsing."""
from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from typing import Any, Optional

import yaml

from .game import SCALAR_FIELDS, GameSpec, NoiseSpec, SpecError, state_from_dict
from .graphon import GraphonError, graphon_from_dict
from .riccati import SolverConfig
from .simulate import PathConfig


class ConfigError(ValueError):
    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("invalid config:\n" + "\n".join(f"  - {v}" for v in self.violations))


class _Loader(yaml.SafeLoader):
    pass


# YAML 1.1 wants a dot in floats; accept 1e-3 and friends as well
_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"""^(?:[-+]?(?:[0-9][0-9_]*)\.[0-9_]*(?:[eE][-+]?[0-9]+)?
                   |[-+]?(?:[0-9][0-9_]*)(?:[eE][-+]?[0-9]+)
                   |\.[0-9_]+(?:[eE][-+][0-9]+)?
                   |[-+]?\.(?:inf|Inf|INF)
                   |\.(?:nan|NaN|NAN))$""", re.X),
    list("-+0123456789."))


@dataclass(frozen=True)
class OutputConfig:
    directory: str = "results"
    flatten_pi: bool = False
    per_path_csv: bool = False


@dataclass(frozen=True)
class StudyConfig:
    eps_target: float = 0.1
    continuation_steps: int = 10
    alphas: tuple = (0.25, 0.5, 0.9)
    scales: tuple = (0.5, 0.9, 1.1, 1.5)
    offset_magnitude: float = 0.5
    best_response_tol: float = 1e-6
    grid_ns: tuple = (16, 32, 64)
    dts: tuple = (0.01, 0.005, 0.0025)
    dt_sims: tuple = (0.004, 0.002, 0.001)
    path_counts: tuple = (250, 1000, 4000)


@dataclass(frozen=True)
class ExperimentConfig:
    game: GameSpec = field(default_factory=GameSpec)
    grid_n: int = 16
    solver: SolverConfig = field(default_factory=SolverConfig)
    simulation: PathConfig = field(default_factory=PathConfig)
    outputs: OutputConfig = field(default_factory=OutputConfig)
    studies: StudyConfig = field(default_factory=StudyConfig)

    def to_dict(self) -> dict:
        sim = self.simulation
        st = self.studies
        return {
            "game": self.game.to_dict(),
            "grid_n": self.grid_n,
            "solver": {"dt": self.solver.dt, "symmetrize": self.solver.symmetrize,
                       "blowup_threshold": self.solver.blowup_threshold},
            "simulation": {"dt_sim": sim.dt_sim, "num_paths": sim.num_paths, "seed": sim.seed,
                           "modes_used": sim.modes_used},
            "outputs": {"directory": self.outputs.directory, "flatten_pi": self.outputs.flatten_pi,
                        "per_path_csv": self.outputs.per_path_csv},
            "studies": {"eps_target": st.eps_target, "continuation_steps": st.continuation_steps,
                        "alphas": list(st.alphas), "scales": list(st.scales),
                        "offset_magnitude": st.offset_magnitude,
                        "best_response_tol": st.best_response_tol,
                        "grid_ns": list(st.grid_ns), "dts": list(st.dts),
                        "dt_sims": list(st.dt_sims), "path_counts": list(st.path_counts)},
        }

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def serialize_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False, default_flow_style=None)


# --- strict parsing ---------------------------------------------------------

def _is_real(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


class _Checker:
    def __init__(self):
        self.errors: list[str] = []

    def mapping(self, d, path, allowed) -> dict:
        if d is None:
            return {}
        if not isinstance(d, dict):
            self.errors.append(f"{path}: expected a mapping, got {type(d).__name__}")
            return {}
        for key in d:
            if key not in allowed:
                self.errors.append(f"{path}.{key}: unknown key")
        return {k: v for k, v in d.items() if k in allowed}

    def real(self, d, key, path) -> Optional[float]:
        v = d[key]
        if not _is_real(v):
            self.errors.append(f"{path}.{key}: expected a real number, got {v!r}")
            return None
        return float(v)

    def integer(self, d, key, path) -> Optional[int]:
        v = d[key]
        if not _is_int(v):
            self.errors.append(f"{path}.{key}: expected an integer, got {v!r}")
            return None
        return v

    def boolean(self, d, key, path) -> Optional[bool]:
        v = d[key]
        if not isinstance(v, bool):
            self.errors.append(f"{path}.{key}: expected true/false, got {v!r}")
            return None
        return v

    def reals(self, d, key, path, integer=False) -> Optional[tuple]:
        v = d[key]
        ok = _is_int if integer else _is_real
        if not isinstance(v, list) or not v or not all(ok(x) for x in v):
            kind = "integers" if integer else "real numbers"
            self.errors.append(f"{path}.{key}: expected a non-empty list of {kind}, got {v!r}")
            return None
        return tuple(v) if integer else tuple(float(x) for x in v)

    def matrix(self, d, key, path) -> Optional[list]:
        v = d[key]
        if not isinstance(v, list) or not all(isinstance(r, list) and all(_is_real(x) for x in r) for r in v):
            self.errors.append(f"{path}.{key}: expected a list of rows of real numbers")
            return None
        return [[float(x) for x in r] for r in v]


_GRAPHON_KEYS = {"constant": {"kind", "c"}, "step": {"kind", "partition", "values"},
                 "named": {"kind", "name"}}
_STATE_KEYS = {"constant": {"kind", "value"}, "step": {"kind", "partition", "values"},
               "cosine": {"kind", "mean", "amplitude", "frequency"}, "values": {"kind", "values"}}


def _graphon(ck: _Checker, raw, path):
    d = ck.mapping(raw, path, {"kind", "c", "partition", "values", "name"})
    kind = d.get("kind")
    if kind not in _GRAPHON_KEYS:
        ck.errors.append(f"{path}.kind: expected one of {sorted(_GRAPHON_KEYS)}, got {kind!r}")
        return None
    for key in d:
        if key not in _GRAPHON_KEYS[kind]:
            ck.errors.append(f"{path}.{key}: not valid for kind {kind!r}")
    missing = _GRAPHON_KEYS[kind] - set(d)
    if missing:
        ck.errors.append(f"{path}: missing {sorted(missing)}")
        return None
    out = {"kind": kind}
    if kind == "constant":
        out["c"] = ck.real(d, "c", path)
    elif kind == "step":
        out["partition"] = ck.reals(d, "partition", path)
        out["values"] = ck.matrix(d, "values", path)
    else:
        out["name"] = d["name"]
    if any(v is None for v in out.values()):
        return None
    return out


def _state(ck: _Checker, raw, path):
    d = ck.mapping(raw, path, set().union(*_STATE_KEYS.values()))
    kind = d.get("kind")
    if kind not in _STATE_KEYS:
        ck.errors.append(f"{path}.kind: expected one of {sorted(_STATE_KEYS)}, got {kind!r}")
        return None
    for key in d:
        if key not in _STATE_KEYS[kind]:
            ck.errors.append(f"{path}.{key}: not valid for kind {kind!r}")
    out = {"kind": kind}
    for key in sorted(_STATE_KEYS[kind] - {"kind"}):
        if key not in d:
            if kind in ("step", "values"):
                ck.errors.append(f"{path}: missing {key!r}")
                return None
            continue
        if key in ("partition", "values"):
            out[key] = ck.reals(d, key, path)
        else:
            out[key] = ck.real(d, key, path)
    if any(v is None for v in out.values()):
        return None
    if kind == "step" and len(out["partition"]) != len(out["values"]) + 1:
        ck.errors.append(f"{path}: step state needs len(partition) == len(values) + 1")
        return None
    return out


def _game(ck: _Checker, raw) -> dict:
    allowed = set(SCALAR_FIELDS) | {"M1", "M2", "noise1", "noise2", "x0_1", "x0_2"}
    d = ck.mapping(raw, "game", allowed)
    out: dict[str, Any] = {}
    for key in SCALAR_FIELDS:
        if key in d:
            v = ck.real(d, key, "game")
            if v is not None:
                out[key] = v
    for key in ("M1", "M2"):
        if key in d:
            g = _graphon(ck, d[key], f"game.{key}")
            if g is not None:
                out[key] = g
    for key in ("noise1", "noise2"):
        if key in d:
            nd = ck.mapping(d[key], f"game.{key}", {"lambda0", "num_modes"})
            noise = {}
            if "lambda0" in nd:
                noise["lambda0"] = ck.real(nd, "lambda0", f"game.{key}")
            if "num_modes" in nd:
                noise["num_modes"] = ck.integer(nd, "num_modes", f"game.{key}")
            if all(v is not None for v in noise.values()):
                out[key] = noise
    for key in ("x0_1", "x0_2"):
        if key in d:
            s = _state(ck, d[key], f"game.{key}")
            if s is not None:
                out[key] = s
    return out


def _build_game(ck: _Checker, gd: dict) -> Optional[GameSpec]:
    kw: dict[str, Any] = {k: gd[k] for k in SCALAR_FIELDS if k in gd}
    ok = True
    for key in ("M1", "M2"):
        if key in gd:
            try:
                kw[key] = graphon_from_dict(gd[key])
            except GraphonError as e:
                ck.errors.append(f"game.{key}: {e}")
                ok = False
    for key in ("noise1", "noise2"):
        if key in gd:
            kw[key] = NoiseSpec(**gd[key])
    for key in ("x0_1", "x0_2"):
        if key in gd:
            kw[key] = state_from_dict(gd[key])
    try:
        game = GameSpec(**kw)
    except SpecError as e:
        ck.errors += [f"game: {v}" for v in e.violations]
        return None
    return game if ok else None


def _divides(span, dt) -> bool:
    k = round(span / dt)
    return k >= 1 and abs(k * dt - span) <= 1e-9 * max(span, 1.0)


def parse_config(text: str) -> ExperimentConfig:
    """Parse and validate a YAML experiment config; raises ConfigError listing every violation."""
    try:
        raw = yaml.load(text, Loader=_Loader)
    except yaml.MarkedYAMLError as e:
        mark = e.problem_mark or e.context_mark
        where = f"line {mark.line + 1}, column {mark.column + 1}" if mark else "unknown position"
        raise ConfigError([f"syntax error at {where}: {e.problem or e}"]) from None
    except yaml.YAMLError as e:
        raise ConfigError([f"syntax error: {e}"]) from None

    ck = _Checker()
    top = ck.mapping(raw, "config", {"game", "grid_n", "solver", "simulation", "outputs", "studies"})
    game = _build_game(ck, _game(ck, top.get("game")))

    grid_n = ExperimentConfig.grid_n
    if "grid_n" in top:
        v = ck.integer(top, "grid_n", "config")
        if v is not None:
            if v < 1:
                ck.errors.append(f"config.grid_n: must be >= 1, got {v}")
            grid_n = v

    sd = ck.mapping(top.get("solver"), "solver", {"dt", "symmetrize", "blowup_threshold"})
    solver_kw = {}
    for key, conv in (("dt", ck.real), ("symmetrize", ck.boolean), ("blowup_threshold", ck.real)):
        if key in sd:
            v = conv(sd, key, "solver")
            if v is not None:
                solver_kw[key] = v
    try:
        solver = SolverConfig(**solver_kw)
    except ValueError as e:
        ck.errors += [f"solver: {m}" for m in str(e).split("; ")]
        solver = None

    md = ck.mapping(top.get("simulation"), "simulation", {"dt_sim", "num_paths", "seed", "modes_used"})
    sim_kw = {}
    for key, conv in (("dt_sim", ck.real), ("num_paths", ck.integer), ("seed", ck.integer)):
        if key in md:
            v = conv(md, key, "simulation")
            if v is not None:
                sim_kw[key] = v
    if "modes_used" in md and md["modes_used"] is not None:
        v = ck.integer(md, "modes_used", "simulation")
        if v is not None:
            sim_kw["modes_used"] = v
    try:
        simulation = PathConfig(**sim_kw)
    except ValueError as e:
        ck.errors += [f"simulation: {m}" for m in str(e).split("; ")]
        simulation = None

    od = ck.mapping(top.get("outputs"), "outputs", {"directory", "flatten_pi", "per_path_csv"})
    out_kw = {}
    if "directory" in od:
        if isinstance(od["directory"], str) and od["directory"]:
            out_kw["directory"] = od["directory"]
        else:
            ck.errors.append("outputs.directory: expected a non-empty string")
    for key in ("flatten_pi", "per_path_csv"):
        if key in od:
            v = ck.boolean(od, key, "outputs")
            if v is not None:
                out_kw[key] = v

    study_fields = StudyConfig.__dataclass_fields__
    td = ck.mapping(top.get("studies"), "studies", set(study_fields))
    study_kw = {}
    for key in td:
        default = study_fields[key].default
        if isinstance(default, tuple):
            v = ck.reals(td, key, "studies", integer=key in ("grid_ns", "path_counts"))
        elif isinstance(default, int):
            v = ck.integer(td, key, "studies")
        else:
            v = ck.real(td, key, "studies")
        if v is not None:
            study_kw[key] = v
    studies = StudyConfig(**study_kw)

    # cross-field checks
    if studies.continuation_steps < 1:
        ck.errors.append("studies.continuation_steps: must be >= 1")
    if not all(0 < a < 1 for a in studies.alphas):
        ck.errors.append("studies.alphas: every alpha must lie in (0, 1)")
    horizon = game.T if game is not None else GameSpec.T
    dt = solver_kw.get("dt", SolverConfig.dt)
    if horizon > 0 and dt > 0 and not _divides(horizon, dt):
        ck.errors.append(f"solver.dt: {dt} does not divide T={horizon}")
    if game is not None:
        for d in studies.dts:
            if d <= 0 or not _divides(game.T, d):
                ck.errors.append(f"studies.dts: {d} does not divide T={game.T}")
        if simulation is not None:
            if not _divides(game.T, simulation.dt_sim):
                ck.errors.append(f"simulation.dt_sim: {simulation.dt_sim} does not divide T={game.T}")
            if simulation.modes_used is not None:
                k = max(game.noise1.num_modes, game.noise2.num_modes)
                if simulation.modes_used > k:
                    ck.errors.append(f"simulation.modes_used: {simulation.modes_used} exceeds K={k}")
        for d in studies.dt_sims:
            if d <= 0 or not _divides(game.T, d):
                ck.errors.append(f"studies.dt_sims: {d} does not divide T={game.T}")
        k = max(game.noise1.num_modes, game.noise2.num_modes)
        if k > grid_n:
            ck.errors.append(f"grid_n: {grid_n} is smaller than the number of noise modes {k}")
        if any(n < k for n in studies.grid_ns):
            ck.errors.append(f"studies.grid_ns: every n must be >= the number of noise modes {k}")
    if ck.errors:
        raise ConfigError(ck.errors)
    return ExperimentConfig(game=game, grid_n=grid_n, solver=solver,
                            simulation=simulation, outputs=OutputConfig(**out_kw), studies=studies)


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def reference_config_path(name: str):
    """Path of a shipped reference config: ``scalar``, ``step`` or ``cosine``."""
    from importlib import resources
    files = {"scalar": "a_scalar.yaml", "step": "b_step.yaml", "cosine": "c_cosine.yaml"}
    if name not in files:
        raise KeyError(f"unknown reference config {name!r}; expected one of {sorted(files)}")
    return resources.files("graphon_teams") / "configs" / files[name]


def reference_config(name: str) -> ExperimentConfig:
    return parse_config(reference_config_path(name).read_text(encoding="utf-8"))
