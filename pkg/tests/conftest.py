import functools
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from graphon_teams.config import reference_config  # noqa: E402
from graphon_teams.game import assemble  # noqa: E402
from graphon_teams.graphon import Grid  # noqa: E402
from graphon_teams.riccati import solve_coupled  # noqa: E402

REFERENCE_NAMES = ("scalar", "step", "cosine")


@functools.lru_cache(maxsize=None)
def reference(name, n=None):
    """(config, assembled game, coupled solution) for a shipped reference config."""
    cfg = reference_config(name)
    asm = assemble(cfg.game, Grid(n or cfg.grid_n))
    return cfg, asm, solve_coupled(asm, cfg.solver)


@pytest.fixture(params=REFERENCE_NAMES)
def ref_case(request):
    return reference(request.param)


ACCEPTANCE_LINES = []


def record_criterion(number, ok, detail):
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
