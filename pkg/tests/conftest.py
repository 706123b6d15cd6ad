import numpy as np
import pytest

from soz_adapt import tensor as T
from soz_adapt.model import SozNetConfig


@pytest.fixture
def f64():
    """Run the test body with 64-bit tensors."""
    with T.precision(np.float64):
        yield


def tiny_config(input_length=16, fc_hidden=5, pool=2, channels=(3, 4)):
    """Two conv blocks (two convs each) followed by two linear layers."""
    a, b = channels
    conv = ((1, a, 3, 1), (a, a, 3, 1), (a, b, 3, 1), (b, b, 3, 1))
    probe = SozNetConfig(input_length=input_length, conv_spec=conv, block_pool=(pool, pool))
    return SozNetConfig(input_length=input_length, conv_spec=conv, block_pool=(pool, pool),
                        fc_spec=(probe.flatten_width(), fc_hidden, 2))


_CRITERIA = []


def record_criterion(name, ok, detail):
    """Collect one acceptance line; printed in the terminal summary."""
    _CRITERIA.append(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)
