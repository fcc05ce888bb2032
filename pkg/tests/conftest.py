import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

from _acceptance import CRITERIA, RESULTS  # noqa: E402


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key, title in CRITERIA.items():
        if key in RESULTS:
            ok, detail = RESULTS[key]
            terminalreporter.write_line(f"{key} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
        else:
            terminalreporter.write_line(f"{key} NOT RUN  {title}")
