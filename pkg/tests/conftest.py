import pytest

# label -> (passed, detail); criteria are "1".."11", supplementary checks "S1"...
ACCEPTANCE: dict = {}


@pytest.fixture(scope="session")
def acceptance_registry():
    return ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for label in sorted(ACCEPTANCE, key=lambda k: (k.startswith("S"), int(k.lstrip("S")))):
        ok, detail = ACCEPTANCE[label]
        kind = "supplementary" if label.startswith("S") else "criterion"
        terminalreporter.write_line(f"{kind} {label.lstrip('S'):>2}: {'PASS' if ok else 'FAIL'}  {detail}")
