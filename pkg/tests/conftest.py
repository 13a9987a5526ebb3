import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from lmmvar.design import build_model_frame, load_sleepstudy  # noqa: E402
from lmmvar.formula import parse_formula  # noqa: E402
from lmmvar.inference import solve_blue_blup  # noqa: E402
from lmmvar.reml import fit_reml  # noqa: E402

SLEEP_FORMULA = "Reaction ~ Days + (Days || Subject)"


@pytest.fixture(scope="session")
def sleep_frame():
    return build_model_frame(load_sleepstudy(), parse_formula(SLEEP_FORMULA))


@pytest.fixture(scope="session")
def sleep_fit(sleep_frame):
    rep = fit_reml(sleep_frame)
    return solve_blue_blup(sleep_frame, rep.estimates, rep)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
