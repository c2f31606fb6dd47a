import numpy as np
import pytest

from blockvlm.data import Tokenizer, gen_dataset
from blockvlm.model import ModelConfig, init_params


@pytest.fixture(scope="session")
def tiny_config():
    return ModelConfig(d_model=32, n_layers=2, n_heads=4, max_positions=256, block_size=4, d_vis=8)


@pytest.fixture(scope="session")
def tiny_params(tiny_config):
    return init_params(tiny_config, seed=0)


@pytest.fixture(scope="session")
def tokenizer():
    return Tokenizer()


@pytest.fixture(scope="session")
def samples():
    return gen_dataset(64, 2, 4, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# ---------------------------------------------------------------- acceptance reporting

_ACCEPTANCE = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    number, text = marker.args
    spent = _ACCEPTANCE.get(number, (None, None, 0.0))[2] + call.duration
    if report.when == "setup":
        _ACCEPTANCE[number] = (text, "PASS" if report.passed else "FAIL", spent)
    elif report.when == "call":
        _ACCEPTANCE[number] = (text, "PASS" if report.passed else "FAIL", spent)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        text, status, seconds = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:>2} {status}  {text}  ({seconds:.1f}s)")
