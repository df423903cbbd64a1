import os
import sys

sys.path.insert(0, os.path.dirname(__file__))

import _util  # noqa: E402


def pytest_terminal_summary(terminalreporter):
    if _util.VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _util.VERDICTS:
            terminalreporter.write_line(line)
