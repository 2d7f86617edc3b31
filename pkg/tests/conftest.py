import math

import numpy as np
import pytest

from pcsqkd.security import LinkBudget

# reference 9.5 km link: 2.2 dB loss, trusted receiver eta = 0.6, V_el = 0.1 SNU
T_REF = 10 ** (-0.22)

# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: dict[str, str] = {}


def record_acceptance(key: str, passed: bool, detail: str) -> str:
    line = f"ACCEPTANCE {key}: {'PASS' if passed else 'FAIL'} {detail}"
    ACCEPTANCE_LINES[key] = line
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])


@pytest.fixture
def fig3_link():
    """Link of the V_A sweep: 2.2 dB, eta 0.6, V_el 0.1, xi_B 0.012."""
    return LinkBudget(T=T_REF, eta=0.6, V_el=0.1, xi_B=0.012)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def variance_sigma(samples_fourth_moment: float, variance: float, n: int) -> float:
    """Standard error of a zero-mean sample variance."""
    return math.sqrt((samples_fourth_moment - variance**2) / n)
