"""Shared pytest hooks: surface the acceptance verdict lines in the summary."""
import time
from pathlib import Path

VERDICT_FILE = Path(__file__).resolve().parent.parent / ".acceptance_cache" / "verdicts.txt"

_session_start = time.time()


def pytest_terminal_summary(terminalreporter):
    # only echo verdicts produced by this run, not a stale file
    if VERDICT_FILE.exists() and VERDICT_FILE.stat().st_mtime >= _session_start:
        terminalreporter.section("acceptance criteria")
        for line in VERDICT_FILE.read_text().splitlines():
            terminalreporter.write_line(line)
