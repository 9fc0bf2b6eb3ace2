import pytest

_ACCEPTANCE: dict[str, tuple[bool, str]] = {}


@pytest.fixture
def acceptance():
    """Record one criterion outcome: ``acceptance("A1", ok, detail)``."""

    def record(criterion: str, ok: bool, detail: str) -> None:
        _ACCEPTANCE[criterion] = (bool(ok), detail)
        print(f"{criterion}: {'PASS' if ok else 'FAIL'}  {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(_ACCEPTANCE, key=lambda c: int(c[1:])):
        ok, detail = _ACCEPTANCE[criterion]
        terminalreporter.write_line(f"{criterion}: {'PASS' if ok else 'FAIL'}  {detail}")
