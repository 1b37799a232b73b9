import pytest

_LINES: list[str] = []


class _Recorder:
    def __init__(self):
        self.done = set()

    def record(self, n: int, ok: bool, detail: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
        _LINES.append(line)
        print(line)
        self.done.add(n)


@pytest.fixture
def criterion(request):
    rec = _Recorder()
    yield rec
    n = getattr(request.node.function, "criterion", None)
    if n is not None and n not in rec.done:
        _LINES.append(f"FAIL criterion {n}: {request.node.name} raised before reaching its verdict")


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
