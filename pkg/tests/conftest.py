import numpy as np
import pytest

from vdc_lab.harness.commands import cmd_train_toy
from vdc_lab.harness.config import RunConfig
from vdc_lab.harness.experiment import build_env, load_denoiser

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def default_config():
    return RunConfig.from_dict({})


@pytest.fixture(scope="session")
def trained_run(tmp_path_factory, default_config):
    """The default toy denoiser, trained once per session through the train-toy command."""
    out = tmp_path_factory.mktemp("train_toy")
    record = cmd_train_toy(default_config, out)
    return {"out": out, "record": record, "denoiser_path": out / "denoiser"}


@pytest.fixture(scope="session")
def trained_denoiser(trained_run):
    return load_denoiser(trained_run["denoiser_path"])


@pytest.fixture(scope="session")
def trained_env(default_config, trained_denoiser):
    return build_env(default_config, trained_denoiser)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
