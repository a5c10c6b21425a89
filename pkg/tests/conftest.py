import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

import acc_report  # noqa: E402


def pytest_terminal_summary(terminalreporter):
    if not acc_report.LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in acc_report.LINES:
        terminalreporter.write_line(line)
