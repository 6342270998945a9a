import pytest

from helpers import tiny_model
from navil.params import init_params


@pytest.fixture
def model_cfg():
    return tiny_model()


@pytest.fixture
def store(model_cfg):
    return init_params(model_cfg, 0)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        status, title, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"{status} [{n:2d}] {title}: {detail}")
