import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

import acceptance_log  # noqa: E402


def pytest_terminal_summary(terminalreporter):
    if acceptance_log.LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(acceptance_log.LINES, key=lambda k: (isinstance(k, str), str(k).zfill(3))):
            terminalreporter.write_line(acceptance_log.LINES[key])
