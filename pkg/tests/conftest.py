"""Shared pytest hooks: collect acceptance-criterion verdicts and print one
line per criterion at the end of the run."""

acceptance_lines: list[str] = []


def record(name: str, ok: bool, detail: str = "") -> str:
    verdict = "PASS" if ok else "FAIL"
    line = f"{name}: {verdict}" + (f"  [{detail}]" if detail else "")
    acceptance_lines.append(line)
    return line


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "slow: desk-scale experiments that pre-train real models")
    config.addinivalue_line(
        "markers", "acceptance: release gate criteria (one summary line each)")


def pytest_terminal_summary(terminalreporter):
    if acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_lines:
            terminalreporter.write_line(line)
