import os
import sys

from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile(
    "default",
    max_examples=25,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")


def pytest_terminal_summary(terminalreporter):
    reports = [
        r
        for key in ("passed", "failed")
        for r in terminalreporter.stats.get(key, [])
        if r.when == "call" and "test_acceptance" in r.nodeid
    ]
    if not reports:
        return
    terminalreporter.section("acceptance criteria")
    for r in sorted(reports, key=lambda r: dict(r.user_properties).get("criterion", 0)):
        props = dict(r.user_properties)
        verdict = "PASS" if r.passed else "FAIL"
        terminalreporter.write_line(
            f"{verdict} criterion {props.get('criterion', '?'):>2}: {props.get('title', r.nodeid)}"
            f" | {props.get('detail', '')}"
        )
