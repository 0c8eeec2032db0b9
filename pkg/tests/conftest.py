import numpy as np
import pytest
import torch

from rprdepth.data import generate_synthetic_scene


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture(scope="session")
def tiny_triplets():
    """Twelve small triplets shared by the fast tests."""
    return generate_synthetic_scene(3, 12, (32, 32), 2)


def pytest_terminal_summary(terminalreporter):
    """One line per acceptance criterion, in criterion order."""
    from tests import test_acceptance

    results = test_acceptance.RESULTS
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
