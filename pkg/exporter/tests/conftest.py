import re

_CRITERION = re.compile(r"test_a(\d+)_(\w+)")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    verdicts = {}
    for status in ("passed", "failed", "error", "skipped"):
        for report in terminalreporter.stats.get(status, []):
            nodeid = getattr(report, "nodeid", "")
            if "test_acceptance.py" not in nodeid:
                continue
            m = _CRITERION.search(nodeid.rsplit("::", 1)[-1])
            if m is None:
                continue
            tag = f"A{m.group(1)}"
            label = m.group(2).replace("_", " ")
            if verdicts.get(tag, (None, "passed"))[1] == "passed":
                verdicts[tag] = (label, status)
    if not verdicts:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for tag in sorted(verdicts, key=lambda t: int(t[1:])):
        label, status = verdicts[tag]
        word = {"passed": "PASS", "skipped": "SKIP"}.get(status, "FAIL")
        terminalreporter.write_line(f"{tag} {word} — {label}")
