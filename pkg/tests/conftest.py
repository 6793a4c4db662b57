import numpy as np
import pytest
import torch


def pytest_configure(config):
    config.acceptance_lines = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)


@pytest.fixture
def record_criterion(request):
    """Append one PASS/FAIL line to the terminal summary; ``ok=None`` records a skip."""
    def record(number, title, ok, detail=""):
        status = "SKIP" if ok is None else ("PASS" if ok else "FAIL")
        line = f"criterion {number:>2} {status}  {title}" + (f"  [{detail}]" if detail else "")
        request.config.acceptance_lines.append(line)
        print(line)
    return record


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)
    yield
