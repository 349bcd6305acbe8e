import sys
from pathlib import Path

import pytest
from hypothesis import settings

from fedidm.acdg import AcdgConfig
from fedidm.condense import DmConfig
from fedidm.sim import DataConfig, SimConfig

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


@pytest.fixture
def tiny_cfg() -> SimConfig:
    """A simulation small enough to run in well under a second."""
    return SimConfig(n_clients=6, clients_per_round=6, total_rounds=8, stage_switch=3,
                     dm=DmConfig(ipc=3, steps=5, n_random_nets=2),
                     acdg=AcdgConfig(epochs=2, warmup_epochs=2),
                     data=DataConfig(n_per_class=40, n_test_per_class=25, input_dim=8))


_CRITERIA: list[str] = []


@pytest.fixture(scope="session")
def criterion_log():
    """Collects one status line per acceptance criterion for the terminal summary."""
    return _CRITERIA


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_CRITERIA, key=lambda s: (int(s.split()[1].rstrip(":ab")), s)):
            terminalreporter.write_line(line)
