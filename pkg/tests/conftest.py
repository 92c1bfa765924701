def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """Repeat the acceptance battery verdict lines after the test summary."""
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance battery")
        for line in RESULTS:
            terminalreporter.write_line(line)
