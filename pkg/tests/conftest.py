import pytest

_CRITERIA: dict[int, tuple[bool, str]] = {}
_TITLES = {
    1: "oracle correctness",
    2: "stash bound",
    3: "traffic formulas",
    4: "ring vs path traffic",
    5: "stall structure",
    6: "concurrency payoff",
    7: "column scaling",
    8: "proram pathology",
    9: "palermo prefetch",
    10: "security statistics",
    11: "interleaving exhaustion",
    12: "determinism",
}


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail)`` records the verdict of acceptance criterion ``n``."""
    def record(n, ok, detail=""):
        prev = _CRITERIA.get(n)
        if prev is not None:
            ok = ok and prev[0]
            detail = f"{prev[1]}; {detail}" if prev[1] else detail
        _CRITERIA[n] = (bool(ok), detail)
        print(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}: {detail}")
    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_TITLES):
        if n in _CRITERIA:
            ok, detail = _CRITERIA[n]
            tr.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'} {_TITLES[n]}: {detail}")
        else:
            tr.write_line(f"criterion {n:2d} NOT RUN {_TITLES[n]}")
