"""Acceptance bookkeeping: tests tagged ``@pytest.mark.criterion(n)`` roll up
into one PASS/FAIL line per criterion at the end of the run."""
import pytest

CRITERIA = {
    1: "gradient correctness (primitives < 1e-4, end-to-end < 1e-3)",
    2: "geometry oracle equivalence (FPS, kNN, HD95)",
    3: "imbalance reduction >= 50x on every corpus case",
    4: "probability sweep: mean Dice >= 0.90, every case > 0.5",
    5: "false positives spanning <= 9 slices removed in >= 90% of cells",
    6: "determinism of training, tables and refined volumes",
    7: "pipeline invariants (coverage, subset, softmax rows)",
}

_outcomes = {}
_notes = {}


def note(n, text):
    """Attach a measured value to criterion ``n``'s summary line."""
    _notes.setdefault(n, []).append(text)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion this test establishes")


@pytest.hookimpl(tryfirst=True)
def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n = marker.args[0]
    if call.when == "call" or (call.when == "setup" and call.excinfo is not None):
        ok = call.excinfo is None
        _outcomes.setdefault(n, []).append((item.nodeid, ok))


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n, label in CRITERIA.items():
        runs = _outcomes.get(n)
        if not runs:
            tr.write_line(f"criterion {n}: NOT RUN  {label}")
            continue
        failed = [nid for nid, ok in runs if not ok]
        status = "PASS" if not failed else "FAIL"
        tr.write_line(f"criterion {n}: {status}  {label}  ({len(runs) - len(failed)}/{len(runs)} checks)")
        for text in _notes.get(n, []):
            for line in text.rstrip().splitlines():
                tr.write_line(f"    {line}")
