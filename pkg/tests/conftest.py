import re

import pytest

from gap_lab.keyserver import DiagnosisBundle
from gap_lab.simulate import fig5_scenario, run_scenario

CRITERIA_TITLES = {
    1: "crypto vector pinning",
    2: "interval arithmetic",
    3: "airtime chain",
    4: "feasibility suite",
    5: "profiling end-to-end",
    6: "wormhole end-to-end",
    7: "property suites",
    8: "key-server contract",
}

_NODE_RE = re.compile(r"test_acceptance\.py::test_criterion_(\d+)")


@pytest.fixture(scope="session")
def fig5_sim():
    return run_scenario(fig5_scenario())


@pytest.fixture(scope="session")
def fig5_bundles(fig5_sim):
    return [
        DiagnosisBundle(teks=tuple(teks), submitted_at=fig5_sim.scenario.horizon[1])
        for _agent, teks in sorted(fig5_sim.diagnosed_teks().items())
    ]


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    outcomes = {}
    for status in ("passed", "failed", "error"):
        for report in terminalreporter.stats.get(status, []):
            nodeid = getattr(report, "nodeid", "")
            m = _NODE_RE.search(nodeid)
            if m and getattr(report, "when", "call") == "call":
                n = int(m.group(1))
                worst = outcomes.get(n, "passed")
                outcomes[n] = status if status != "passed" else worst
    if not outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(outcomes):
        verdict = "PASS" if outcomes[n] == "passed" else "FAIL"
        title = CRITERIA_TITLES.get(n, "")
        terminalreporter.write_line(f"criterion {n} ({title}): {verdict}")
