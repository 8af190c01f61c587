import importlib

import numpy as np
import pytest

from layercka import _kernels_py

try:
    _ckernels = importlib.import_module("layercka._ckernels")
except ImportError:  # extension not built
    _ckernels = None

KERNEL_MODULES = [pytest.param(_kernels_py, id="python")]
if _ckernels is not None:
    KERNEL_MODULES.append(pytest.param(_ckernels, id="cython"))


@pytest.fixture(params=KERNEL_MODULES)
def kernels(request):
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import helpers
    if helpers.ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(helpers.ACCEPTANCE):
            terminalreporter.write_line(helpers.ACCEPTANCE[n])
