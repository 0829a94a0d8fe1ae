import contextlib

import pytest

_RESULTS: dict[int, tuple[str, str, str]] = {}


class AcceptanceRecorder:
    """Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""

    @contextlib.contextmanager
    def criterion(self, number: int, title: str):
        detail = {"text": ""}
        try:
            yield detail
        except BaseException as exc:
            _RESULTS[number] = ("FAIL", title, detail["text"] or f"{type(exc).__name__}: {exc}".splitlines()[0])
            raise
        _RESULTS[number] = ("PASS", title, detail["text"])


@pytest.fixture(scope="session")
def acceptance():
    return AcceptanceRecorder()


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        status, title, detail = _RESULTS[number]
        line = f"{status} criterion {number}: {title}"
        terminalreporter.write_line(f"{line} ({detail})" if detail else line)
