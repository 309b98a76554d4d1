def pytest_terminal_summary(terminalreporter):
    import acceptance_runs

    if acceptance_runs.LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(acceptance_runs.LINES):
            terminalreporter.write_line(line)
