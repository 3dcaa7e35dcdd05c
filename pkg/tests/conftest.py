import numpy as np
import pytest

from chunklm.numerics import Tensor, mul, tensor_sum


def leaf(a):
    return Tensor(np.array(a, dtype=np.float64), requires_grad=True)


def probe_sum(out, seed=0):
    """Scalarize an op output with fixed random weights so every coordinate matters."""
    w = np.random.default_rng(seed).standard_normal(out.shape)
    return tensor_sum(mul(out, w))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE = []


def record_criterion(tag, ok, detail):
    line = f"{tag} {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
