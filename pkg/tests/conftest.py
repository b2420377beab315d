def pytest_terminal_summary(terminalreporter):
    """One pass/fail line per acceptance criterion, in criterion order."""
    rows = {}
    for outcome in ("passed", "failed", "error"):
        for report in terminalreporter.stats.get(outcome, []):
            props = dict(getattr(report, "user_properties", []))
            if "criterion" not in props or report.when not in ("call", "setup"):
                continue
            number, title = props["criterion"]
            ok = outcome == "passed"
            if number in rows:
                ok = ok and rows[number][1]
            rows[number] = (title, ok, props.get("detail", ""))
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(rows):
        title, ok, detail = rows[number]
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}"
        terminalreporter.write_line(line + (f"  ({detail})" if detail else ""))
