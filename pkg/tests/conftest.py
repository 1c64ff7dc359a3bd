"""Shared pytest plumbing: a per-criterion verdict line for the
acceptance suite, printed after the normal test summary."""

import re

CRITERION_LABELS = {
    1: "gradient correctness on toy configurations",
    2: "untrained model equals the repeated-frame baseline in reports",
    3: "decoder call counts: one parallel pass, one per stepwise frame",
    4: "parallel decoding throughput at least 5x stepwise",
    5: "training beats the baseline and classifies activities",
    6: "loss arithmetic matches hand values and brute force",
    7: "core operations match independent oracles",
    8: "attention rows are distributions and masks hide the future",
    9: "zero activity weight leaves the activity head untouched",
    10: "file formats round-trip without loss",
}

_verdicts = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    match = re.search(r"criterion_(\d+)", report.nodeid)
    if not match:
        return
    number = int(match.group(1))
    if report.when == "call" or report.outcome != "passed":
        previous = _verdicts.get(number)
        if previous != "failed":
            _verdicts[number] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if not _verdicts:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for number in sorted(_verdicts):
        verdict = "PASS" if _verdicts[number] == "passed" else "FAIL"
        label = CRITERION_LABELS.get(number, "")
        terminalreporter.write_line(f"criterion {number:2d} ({label}): {verdict}")
