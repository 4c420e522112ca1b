import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from steamflow.harness import TrainingSettings  # noqa: E402

# acceptance lines, printed in the terminal summary whatever the outcome
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


# Small training budget for plumbing tests that only need working controllers.
QUICK = TrainingSettings(excitation_segments=60, identification_epochs=40, mrc_epochs=15, mrc_windows=4)


@pytest.fixture(scope="session")
def quick_bundle():
    from steamflow.harness import train_controllers
    return train_controllers(0, QUICK)


@pytest.fixture(scope="session")
def nominal_bundle():
    from steamflow.harness import train_controllers
    return train_controllers(0)
