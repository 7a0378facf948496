"""Collect acceptance-criterion outcomes and print one PASS/FAIL line each."""
from __future__ import annotations

_OUTCOMES: dict[str, tuple[int, str, bool, str]] = {}


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    if report.when == "call" or (report.when == "setup" and report.failed):
        num, name = props["criterion"]
        detail = props.get("detail", "")
        if report.failed:
            message = getattr(report.longrepr, "reprcrash", None)
            reason = message.message.splitlines()[0] if message is not None else str(report.longrepr)
            detail = f"{detail}; {reason}" if detail else reason
        _OUTCOMES[report.nodeid] = (num, name, report.passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for num, name, passed, detail in sorted(_OUTCOMES.values()):
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"criterion {num} ({name}): {status} - {detail}")
